"""Generative models and the Monte Carlo harness for size/power/coverage runs.

The log-linear family draws failure times and marks from the hazard
exp(gamma v + (alpha + beta v) z) with a Bernoulli(1/2) treatment arm: the mark
integrates out to a constant total hazard per arm, so failure times are
exponential and the mark is an independent exponentially tilted draw on
[0, 1]. The crossing model pairs a flat control hazard with a linearly rising
treated hazard so that the marginal hazard ratio is exactly one while the
mark-specific one crosses from protection to harm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .data import AnalysisConfig, Dataset
from .estimator import EstimationError, beta_at_mark, cox_fit, fit_profile
from .inference import (
    InferenceError,
    cumulative_curves,
    cv_simultaneous_band_bridge,
    default_test_grid,
    test_h10,
    test_h20,
    variance_bundle,
)

__all__ = [
    "SimulationError",
    "SimModelSpec",
    "MCConfig",
    "MCReport",
    "MODEL_TABLE",
    "censoring_rate_for_target",
    "sample_mark13",
    "sample_crossing",
    "sample_dataset",
    "run_study",
]


class SimulationError(RuntimeError):
    """Monte Carlo run aborted (for example too many failed replicates)."""


MODEL_TABLE = {
    "m1": (0.0, 0.0, 0.3),
    "m2": (-0.5, 0.5, 0.3),
    "m3": (-0.6, 0.6, 0.3),
    "m4": (-0.6, 0.0, 0.3),
    "m5": (-0.69, 0.0, 0.3),
    "m6": (-1.2, 1.2, 0.3),
    "m7": (-1.5, 1.5, 0.3),
    "m8": (-1.8, 1.8, 0.3),
}


def _expm1_over(c: float) -> float:
    """(exp(c) - 1) / c with the c -> 0 limit."""
    return math.expm1(c) / c if abs(c) > 1e-12 else 1.0


@dataclass(frozen=True)
class SimModelSpec:
    """Generative model: log-linear family or the crossing counterexample."""

    kind: str = "mark13"
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.3
    censoring_target: float = 0.25
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("mark13", "crossing"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not (0.0 < self.censoring_target <= 0.9):
            raise ValueError("censoring target must lie in (0, 0.9]")

    @classmethod
    def from_name(cls, name: str, censoring_target: float = 0.25) -> "SimModelSpec":
        name = name.lower()
        if name == "crossing":
            return cls(kind="crossing", censoring_target=censoring_target, label="crossing")
        if name not in MODEL_TABLE:
            raise ValueError(f"unknown model name {name!r}")
        a, b, g = MODEL_TABLE[name]
        return cls(
            kind="mark13", alpha=a, beta=b, gamma=g,
            censoring_target=censoring_target, label=name,
        )

    def arm_rate(self, z: int) -> float:
        """Total (mark-integrated) hazard of arm z; constant in time."""
        if self.kind == "crossing":
            return 1.0
        c = self.gamma + self.beta * z
        return math.exp(self.alpha * z) * _expm1_over(c)

    def horizon(self, z: int) -> float:
        """Administrative follow-up end: 99th percentile of the arm's failure law."""
        return math.log(100.0) / self.arm_rate(z)

    # ----- true curves used for coverage ------------------------------------

    def true_beta1(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "crossing":
            return np.log(2.0 * v)
        return self.alpha + self.beta * v

    def true_ve(self, v):
        return 1.0 - np.exp(self.true_beta1(v))

    def true_cv(self, v, a: float):
        v = np.asarray(v, dtype=float)
        if self.kind == "crossing":
            return (v - a) - (v**2 - a**2)
        if abs(self.beta) < 1e-12:
            return (v - a) * (1.0 - math.exp(self.alpha))
        return (v - a) - (
            np.exp(self.alpha + self.beta * v) - math.exp(self.alpha + self.beta * a)
        ) / self.beta


def censoring_rate_for_target(spec: SimModelSpec, target: float) -> float:
    """Exponential censoring rate giving the requested censored fraction.

    Solves 0.5 c/(c + rate0) + 0.5 c/(c + rate1) = target; closed form when the
    two arm rates agree, bisection to 1e-10 otherwise.
    """
    if not (0.0 < target <= 0.9):
        raise ValueError("target censoring fraction must lie in (0, 0.9]")
    rate0, rate1 = spec.arm_rate(0), spec.arm_rate(1)
    if abs(rate0 - rate1) < 1e-12 * max(rate0, rate1):
        return rate0 * target / (1.0 - target)

    def fraction(c):
        return 0.5 * (c / (c + rate0) + c / (c + rate1)) - target

    hi = max(rate0, rate1)
    while fraction(hi) < 0:
        hi *= 2.0
    return float(brentq(fraction, 0.0, hi, xtol=1e-10, rtol=1e-12))


def _assemble(spec: SimModelSpec, z, times, marks, rng, n) -> Dataset:
    c_rate = censoring_rate_for_target(spec, spec.censoring_target)
    censor = rng.exponential(1.0 / c_rate, n)
    horizon = np.where(z == 1, spec.horizon(1), spec.horizon(0))
    observed = np.minimum(times, np.minimum(censor, horizon))
    delta = (times <= np.minimum(censor, horizon)).astype(int)
    return Dataset.from_arrays(observed, delta, marks, z.astype(float)[:, None])


def sample_mark13(spec: SimModelSpec, n: int, seed) -> Dataset:
    """Draw n subjects from the log-linear mark-specific hazard model."""
    if spec.kind != "mark13":
        raise ValueError("sample_mark13 needs a mark13 spec")
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, n)
    rate = np.where(z == 1, spec.arm_rate(1), spec.arm_rate(0))
    times = rng.exponential(1.0, n) / rate
    u = rng.uniform(size=n)
    c = spec.gamma + spec.beta * z
    with np.errstate(divide="ignore", invalid="ignore"):
        tilted = np.log1p(u * np.expm1(c)) / c
    marks = np.where(np.abs(c) < 1e-12, u, tilted)
    return _assemble(spec, z, times, marks, rng, n)


def sample_crossing(n: int, seed, censoring_target: float = 0.25) -> Dataset:
    """Draw n subjects from the crossing-hazards counterexample.

    Both arms fail at marginal rate one; the treated arm's marks follow the
    density 2v, the control arm's are uniform.
    """
    spec = SimModelSpec(kind="crossing", censoring_target=censoring_target,
                        label="crossing")
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, n)
    times = rng.exponential(1.0, n)
    u = rng.uniform(size=n)
    marks = np.where(z == 1, np.sqrt(u), u)
    return _assemble(spec, z, times, marks, rng, n)


def sample_dataset(spec: SimModelSpec, n: int, seed) -> Dataset:
    if spec.kind == "crossing":
        return sample_crossing(n, seed, spec.censoring_target)
    return sample_mark13(spec, n, seed)


# --------------------------------------------------------------------------- #
# Monte Carlo harness
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class MCConfig:
    """One Monte Carlo study: model, sample size, replication count, analysis."""

    model: SimModelSpec
    n: int
    replications: int
    analysis: AnalysisConfig
    test_grid: Optional[tuple] = None
    do_h10: bool = True
    do_h20: bool = True
    do_coverage: bool = True
    do_wald: bool = False
    pointwise_marks: tuple = ()
    n_jobs: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.analysis.seed is None:
            raise ValueError("the analysis config must carry a seed")


@dataclass(frozen=True)
class MCReport:
    """Aggregated rejection fractions, coverages, and failure accounting."""

    model_label: str
    n: int
    bandwidth: float
    alpha: float
    replications: int
    used: int
    failures: int
    failure_reasons: dict
    rejection: dict
    mc_se: dict
    coverage: dict
    pointwise_coverage: dict
    seed: int
    test_grid: tuple

    def to_dict(self) -> dict:
        return {
            "model": self.model_label,
            "n": self.n,
            "bandwidth": self.bandwidth,
            "alpha": self.alpha,
            "replications": self.replications,
            "used": self.used,
            "failures": self.failures,
            "failure_reasons": dict(self.failure_reasons),
            "rejection": {k: float(v) for k, v in self.rejection.items()},
            "mc_se": {k: float(v) for k, v in self.mc_se.items()},
            "coverage": {k: float(v) for k, v in self.coverage.items()},
            "pointwise_coverage": {
                repr(float(k)): float(v) for k, v in self.pointwise_coverage.items()
            },
            "seed": self.seed,
            "test_grid": [float(v) for v in self.test_grid],
        }

    def to_json(self, handle) -> None:
        json.dump(self.to_dict(), handle, indent=2)
        handle.write("\n")

    def to_table_csv(self, handle) -> None:
        """Rows shaped like the simulation tables: one per statistic."""
        handle.write(
            "model,n,h,statistic,rejection_pct,coverage_grid_pct,coverage_interval_pct\n"
        )
        cg = self.coverage.get("simultaneous_grid")
        ci = self.coverage.get("simultaneous_interval")

        def fmt(x):
            return "" if x is None else repr(round(100.0 * x, 4))

        for name, frac in self.rejection.items():
            handle.write(
                f"{self.model_label},{self.n},{repr(self.bandwidth)},{name},"
                f"{fmt(frac)},{fmt(cg)},{fmt(ci)}\n"
            )


def _replicate(config: MCConfig, index: int) -> dict:
    """One replication: sample, fit, test, check bands. Never raises."""
    seeds = np.random.SeedSequence(entropy=(int(config.analysis.seed), index)).spawn(5)
    out = {"failed": False, "reason": ""}
    try:
        dataset = sample_dataset(config.model, config.n, seeds[0])
        profile = fit_profile(dataset, config.analysis)
        if not profile.converged_mask.all():
            bad = profile.grid[~profile.converged_mask]
            raise EstimationError(
                "unconverged grid points at " + ", ".join(f"{v:g}" for v in bad[:3])
            )
        bundle = variance_bundle(profile)
        curves = cumulative_curves(profile, bundle, dataset)
        alpha = config.analysis.alpha
        R = config.analysis.resamples
        a, b = config.analysis.interval
        grid = np.asarray(
            config.test_grid if config.test_grid is not None else default_test_grid(a, b)
        )
        if config.do_h10:
            rep = test_h10(curves, alpha, R, seeds[1], grid=grid)
            out["h10"] = rep.rejected
        if config.do_h20:
            rep = test_h20(curves, config.analysis.a1, alpha, R, seeds[2], grid=grid)
            out["h20"] = rep.rejected
        if config.do_coverage:
            truth_grid = config.model.true_cv(grid, a)
            band = cv_simultaneous_band_bridge(curves, alpha, R, seeds[3], points=grid)
            out["coverage_grid"] = band.covers(truth_grid)
            fit_grid = config.analysis.grid_points()
            band_i = cv_simultaneous_band_bridge(
                curves, alpha, R, seeds[4], points=fit_grid
            )
            refined = np.linspace(a, b, 10 * (fit_grid.size - 1) + 1)
            rho2_f = curves.rho2_at(refined)
            half = band_i.crit * (curves.rho2_b + rho2_f) / (
                math.sqrt(curves.n) * curves.rho_b
            )
            diff = np.abs(np.asarray(curves.cv_at(refined)) - config.model.true_cv(refined, a))
            out["coverage_interval"] = bool(np.all(diff <= half))
        if config.pointwise_marks:
            z_crit = norm.isf(alpha / 2.0)
            nh = math.sqrt(config.n * config.analysis.bandwidth)
            res = {}
            for mark in config.pointwise_marks:
                beta1 = float(np.atleast_1d(beta_at_mark(profile, mark))[0])
                var1 = float(
                    np.interp(
                        mark,
                        bundle.grid[bundle.ok],
                        bundle.sandwich[bundle.ok, 0, 0],
                    )
                )
                half = z_crit * math.sqrt(var1) * math.exp(beta1) / nh
                center = 1.0 - math.exp(beta1)
                truth = float(config.model.true_ve(mark))
                res[float(mark)] = bool(abs(center - truth) <= half)
            out["pointwise"] = res
        if config.do_wald:
            fit = cox_fit(dataset)
            out["wald"] = bool(abs(fit.wald_z[0]) > norm.isf(alpha / 2.0))
    except (EstimationError, InferenceError) as exc:
        out = {"failed": True, "reason": f"{type(exc).__name__}: {exc}"}
    return out


def _replicate_star(args):
    return _replicate(*args)


def run_study(config: MCConfig) -> MCReport:
    """Run the replications and aggregate rejection and coverage fractions.

    Replicates draw from independent streams derived from (seed, index), so
    the report is identical for any worker count. Runs with more than 10%
    failed replicates abort with the collected failure reasons.
    """
    indices = range(config.replications)
    if config.n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(
                pool.map(
                    _replicate_star,
                    [(config, i) for i in indices],
                    chunksize=max(1, config.replications // (8 * config.n_jobs)),
                )
            )
    else:
        results = [_replicate(config, i) for i in indices]

    failures = [r for r in results if r["failed"]]
    used = [r for r in results if not r["failed"]]
    reasons = {}
    for r in failures:
        key = r["reason"].split(":")[0]
        reasons[key] = reasons.get(key, 0) + 1
    if len(failures) > 0.10 * config.replications:
        raise SimulationError(
            f"{len(failures)}/{config.replications} replicates failed: {reasons}"
        )
    if not used:
        raise SimulationError("no successful replicates")

    rejection = {}
    coverage = {}
    pointwise = {}

    def frac(getter):
        vals = [getter(r) for r in used]
        return float(np.mean(vals))

    if config.do_h10:
        for stat in ("T_a", "T_m1", "T_m2"):
            rejection[f"h10_{stat}"] = frac(lambda r, s=stat: r["h10"][s])
    if config.do_h20:
        for stat in ("T_a", "T_m1", "T_m2"):
            rejection[f"h20_{stat}"] = frac(lambda r, s=stat: r["h20"][s])
    if config.do_wald:
        rejection["wald"] = frac(lambda r: r["wald"])
    if config.do_coverage:
        coverage["simultaneous_grid"] = frac(lambda r: r["coverage_grid"])
        coverage["simultaneous_interval"] = frac(lambda r: r["coverage_interval"])
    for mark in config.pointwise_marks:
        pointwise[float(mark)] = frac(lambda r, m=float(mark): r["pointwise"][m])

    reps_used = len(used)
    mc_se = {
        k: math.sqrt(max(v * (1.0 - v), 0.0) / reps_used) for k, v in rejection.items()
    }
    a, b = config.analysis.interval
    grid = (
        tuple(config.test_grid)
        if config.test_grid is not None
        else tuple(default_test_grid(a, b))
    )
    return MCReport(
        model_label=config.model.label or config.model.kind,
        n=config.n,
        bandwidth=config.analysis.bandwidth,
        alpha=config.analysis.alpha,
        replications=config.replications,
        used=reps_used,
        failures=len(failures),
        failure_reasons=reasons,
        rejection=rejection,
        mc_se=mc_se,
        coverage=coverage,
        pointwise_coverage=pointwise,
        seed=int(config.analysis.seed),
        test_grid=grid,
    )
