"""Data model, CSV ingestion, validation, and mark rescaling.

A sample is a collection of right-censored follow-up times where each observed
failure carries a continuous mark on [0, 1] (after rescaling) and every subject
carries a possibly time-dependent covariate path.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .kernels import Kernel, get_kernel

__all__ = [
    "DataError",
    "CovariatePath",
    "SurvivalRecord",
    "Dataset",
    "AnalysisConfig",
    "ValidationReport",
    "load_dataset",
    "save_dataset",
    "rescale_marks",
    "validate",
]


class DataError(ValueError):
    """Invalid input data or configuration."""


class CovariatePath:
    """Piecewise-constant, left-continuous covariate path on [0, inf).

    ``values`` holds one p-vector per segment; ``breakpoints`` are the strictly
    ascending segment ends. Evaluation at a breakpoint returns the value of the
    segment ending there. A time-fixed covariate is a single segment.
    """

    __slots__ = ("values", "breakpoints")

    def __init__(self, values, breakpoints=()):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        breakpoints = np.asarray(breakpoints, dtype=float)
        if values.shape[0] != breakpoints.size + 1:
            raise DataError(
                "need exactly one more segment value than breakpoints "
                f"(got {values.shape[0]} values, {breakpoints.size} breakpoints)"
            )
        if breakpoints.size and not np.all(np.diff(breakpoints) > 0):
            raise DataError("breakpoints must be strictly ascending")
        values.flags.writeable = False
        breakpoints.flags.writeable = False
        self.values = values
        self.breakpoints = breakpoints

    @classmethod
    def constant(cls, vec) -> "CovariatePath":
        return cls(np.atleast_1d(np.asarray(vec, dtype=float))[None, :])

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    @property
    def is_fixed(self) -> bool:
        return self.values.shape[0] == 1

    def at(self, t: float) -> np.ndarray:
        """Value at time t (left-continuous in t)."""
        if not self.breakpoints.size:
            return self.values[0]
        idx = int(np.searchsorted(self.breakpoints, t, side="left"))
        return self.values[idx]

    def __eq__(self, other):
        return (
            isinstance(other, CovariatePath)
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.breakpoints, other.breakpoints)
        )

    def __repr__(self):
        if self.is_fixed:
            return f"CovariatePath.constant({self.values[0].tolist()})"
        return (
            f"CovariatePath({self.values.tolist()}, {self.breakpoints.tolist()})"
        )


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: follow-up time, censoring status, mark, covariates.

    The mark is defined exactly when the failure is observed
    (event_indicator == 1); a censored subject carries ``mark=None``.
    """

    follow_up_time: float
    event_indicator: int
    mark: Optional[float]
    covariates: CovariatePath

    def __post_init__(self):
        if self.follow_up_time < 0:
            raise DataError(f"negative follow-up time {self.follow_up_time}")
        if self.event_indicator not in (0, 1):
            raise DataError(f"status must be 0 or 1, got {self.event_indicator}")
        if self.event_indicator == 1 and self.mark is None:
            raise DataError("event without mark")
        if self.event_indicator == 0 and self.mark is not None:
            raise DataError("censored record must not carry a mark")


@dataclass(frozen=True)
class Dataset:
    """Validated sample of SurvivalRecords with shared covariate dimension.

    ``tau`` is the end of follow-up (defaults to the largest follow-up time);
    ``mark_range`` records the affine rescaling applied to the marks, if any,
    so reports can be mapped back to the native scale.
    """

    records: tuple
    p: int
    tau: float
    mark_range: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for k, r in enumerate(self.records):
            if r.covariates.dimension != self.p:
                raise DataError(
                    f"record {k} has covariate dimension "
                    f"{r.covariates.dimension}, expected {self.p}"
                )
        if self.records:
            tmax = max(r.follow_up_time for r in self.records)
            if self.tau < tmax:
                raise DataError(f"tau={self.tau} below largest follow-up time {tmax}")

    @classmethod
    def from_records(cls, records, tau=None, mark_range=None) -> "Dataset":
        records = tuple(records)
        if not records:
            return cls(records, 0, 0.0 if tau is None else tau, mark_range)
        p = records[0].covariates.dimension
        if tau is None:
            tau = max(r.follow_up_time for r in records)
        return cls(records, p, float(tau), mark_range)

    @classmethod
    def from_arrays(cls, times, status, marks, covariates, tau=None) -> "Dataset":
        """Build from flat arrays with time-fixed covariates (n x p)."""
        times = np.asarray(times, dtype=float)
        status = np.asarray(status, dtype=int)
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        if covariates.shape[0] != times.size:
            covariates = covariates.T
        records = []
        for i in range(times.size):
            mark = float(marks[i]) if status[i] == 1 else None
            records.append(
                SurvivalRecord(
                    float(times[i]), int(status[i]), mark,
                    CovariatePath.constant(covariates[i]),
                )
            )
        return cls.from_records(records, tau=tau)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def n_events(self) -> int:
        return sum(r.event_indicator for r in self.records)

    @property
    def time_fixed(self) -> bool:
        return all(r.covariates.is_fixed for r in self.records)

    def times(self) -> np.ndarray:
        return np.array([r.follow_up_time for r in self.records], dtype=float)

    def status(self) -> np.ndarray:
        return np.array([r.event_indicator for r in self.records], dtype=int)

    def marks(self) -> np.ndarray:
        """Mark per subject; NaN where censored."""
        return np.array(
            [r.mark if r.mark is not None else np.nan for r in self.records],
            dtype=float,
        )

    def fixed_covariates(self) -> np.ndarray:
        """n x p matrix of time-fixed covariate values (requires time_fixed)."""
        if not self.time_fixed:
            raise DataError("dataset has time-dependent covariate paths")
        return np.array([r.covariates.values[0] for r in self.records], dtype=float)


GRID_DEFAULT_COUNT = 33


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings shared by fitting, bands, and tests.

    ``interval`` is the mark window [a, b] strictly inside (0, 1) on which
    inference is carried out; ``grid`` is either a point count (evenly spaced
    on [a, b]) or explicit ascending points; ``a1`` is the left endpoint of the
    second test family's integration range (defaults to the first test-grid
    point).
    """

    bandwidth: float
    interval: tuple = (0.1, 0.9)
    grid: Union[int, Sequence[float]] = GRID_DEFAULT_COUNT
    kernel: Union[str, Kernel] = "epanechnikov"
    alpha: float = 0.05
    resamples: int = 10_000
    seed: Optional[int] = None
    a1: Optional[float] = None

    def __post_init__(self):
        a, b = self.interval
        if not (0.0 < a < b < 1.0):
            raise DataError(f"interval must satisfy 0 < a < b < 1, got {self.interval}")
        if self.bandwidth <= 0:
            raise DataError("bandwidth must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise DataError("alpha must be in (0, 1)")
        if self.resamples < 1:
            raise DataError("resample count must be positive")
        if self.a1 is not None and not (a < self.a1 < b):
            raise DataError(f"a1={self.a1} must lie strictly inside ({a}, {b})")
        if self.seed is not None and not (0 <= int(self.seed) < 2**64):
            raise DataError("seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "kernel", get_kernel(self.kernel))
        if not isinstance(self.grid, int):
            pts = np.asarray(self.grid, dtype=float)
            if pts.ndim != 1 or pts.size < 1 or not np.all(np.diff(pts) > 0):
                raise DataError("explicit grid must be strictly ascending")
            if pts[0] < a or pts[-1] > b:
                raise DataError("grid points must lie inside [a, b]")
            pts.flags.writeable = False
            object.__setattr__(self, "grid", pts)
        elif self.grid < 1:
            raise DataError("grid count must be positive")

    @property
    def a(self) -> float:
        return self.interval[0]

    @property
    def b(self) -> float:
        return self.interval[1]

    def grid_points(self) -> np.ndarray:
        if isinstance(self.grid, int):
            return np.linspace(self.a, self.b, self.grid)
        return np.asarray(self.grid, dtype=float)


_HEADER_FIXED = ("time", "status", "mark")


def _open_source(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def load_dataset(csv_source) -> Dataset:
    """Read a dataset from CSV with header ``time,status,mark,z1..zp``.

    The mark field must be empty exactly on censored rows. Lines starting with
    ``#`` are comments. Accepts a path or an open text handle.
    """
    handle, owned = _open_source(csv_source)
    try:
        rows = csv.reader(line for line in handle if not line.lstrip().startswith("#"))
        try:
            header = next(rows)
        except StopIteration:
            raise DataError("empty input: missing header") from None
        header = [c.strip() for c in header]
        if tuple(h.lower() for h in header[:3]) != _HEADER_FIXED:
            raise DataError(
                "header must start with 'time,status,mark', got " + ",".join(header[:3])
            )
        p = len(header) - 3
        if p < 1:
            raise DataError("need at least one covariate column after 'mark'")
        records = []
        for lineno, row in enumerate(rows, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != p + 3:
                raise DataError(
                    f"line {lineno}: expected {p + 3} fields, got {len(row)}"
                )
            try:
                time = float(row[0])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric time {row[0]!r}") from None
            try:
                status = int(row[1])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric status {row[1]!r}") from None
            if status not in (0, 1):
                raise DataError(f"line {lineno}: status must be 0 or 1, got {status}")
            raw_mark = row[2].strip()
            if status == 1:
                if not raw_mark:
                    raise DataError(f"line {lineno}: event without mark")
                try:
                    mark = float(raw_mark)
                except ValueError:
                    raise DataError(
                        f"line {lineno}: non-numeric mark {raw_mark!r}"
                    ) from None
            else:
                if raw_mark:
                    raise DataError(
                        f"line {lineno}: censored row must leave the mark empty"
                    )
                mark = None
            try:
                z = [float(c) for c in row[3:]]
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric covariate") from None
            if time < 0:
                raise DataError(f"line {lineno}: negative follow-up time {time}")
            records.append(
                SurvivalRecord(time, status, mark, CovariatePath.constant(z))
            )
        return Dataset.from_records(records) if records else Dataset((), p, 0.0)
    finally:
        if owned:
            handle.close()


def save_dataset(dataset: Dataset, destination) -> None:
    """Write a dataset back to the ``time,status,mark,z1..zp`` CSV format.

    Numbers use shortest round-trip decimals, so load(save(d)) == d. Only
    time-fixed covariates serialize to this wide format.
    """
    handle, owned = (
        (open(destination, "w", encoding="utf-8", newline=""), True)
        if isinstance(destination, (str, os.PathLike))
        else (destination, False)
    )
    try:
        writer = csv.writer(handle)
        writer.writerow(_HEADER_FIXED + tuple(f"z{j+1}" for j in range(dataset.p)))
        for r in dataset.records:
            if not r.covariates.is_fixed:
                raise DataError("cannot serialize time-dependent covariates to CSV")
            writer.writerow(
                [repr(r.follow_up_time), r.event_indicator,
                 "" if r.mark is None else repr(r.mark)]
                + [repr(float(z)) for z in r.covariates.values[0]]
            )
    finally:
        if owned:
            handle.close()


def rescale_marks(dataset: Dataset, observed_min: float, observed_max: float) -> Dataset:
    """Affinely map every event mark from [observed_min, observed_max] to [0, 1]."""
    if not observed_min < observed_max:
        raise DataError("observed_min must be below observed_max")
    span = observed_max - observed_min
    records = []
    for r in dataset.records:
        if r.mark is None:
            records.append(r)
            continue
        if not (observed_min <= r.mark <= observed_max):
            raise DataError(
                f"mark {r.mark} outside declared range [{observed_min}, {observed_max}]"
            )
        records.append(
            SurvivalRecord(
                r.follow_up_time, r.event_indicator,
                (r.mark - observed_min) / span, r.covariates,
            )
        )
    return Dataset(
        tuple(records), dataset.p, dataset.tau, (float(observed_min), float(observed_max))
    )


@dataclass(frozen=True)
class ValidationReport:
    """Read-only diagnostics: event counts and kernel-window occupancy."""

    n: int
    n_events: int
    censoring_fraction: float
    grid: np.ndarray
    window_counts: np.ndarray
    flags: tuple

    @property
    def ok(self) -> bool:
        return not self.flags


def validate(dataset: Dataset, config: AnalysisConfig) -> ValidationReport:
    """Report event counts and per-grid-point mark counts within the h-window.

    Flags every grid point whose open window (v - h, v + h) contains no event
    mark; never mutates the dataset.
    """
    grid = config.grid_points()
    marks = dataset.marks()
    event_marks = marks[~np.isnan(marks)]
    counts = np.array(
        [int(np.sum(np.abs(event_marks - v) < config.bandwidth)) for v in grid]
    )
    flags = []
    if dataset.n == 0:
        flags.append("empty dataset")
    elif event_marks.size == 0:
        flags.append("no observed events")
    for v, c in zip(grid, counts):
        if c == 0:
            flags.append(f"empty window at {v:g}")
    frac = 1.0 - dataset.n_events / dataset.n if dataset.n else 0.0
    return ValidationReport(
        dataset.n, int(event_marks.size), frac, grid, counts, tuple(flags)
    )
