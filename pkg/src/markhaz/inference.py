"""Variance estimation, efficacy curves, confidence bands, and the six tests.

Everything here consumes a fitted coefficient profile. The central objects are
the per-mark sandwich variances of the local fits, the cumulative efficacy
curve CV(v) with its variance process rho^2(v), and the Brownian time
transform t(v) = rho^2(v) / rho^2(b) under which the normalized CV process
behaves like a Wiener path. Critical values for the integral-type statistics
are simulated at exactly the transformed grid points, so the discretization of
the test statistics and of their null distributions always match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .estimator import ProfileFit, _Design, _design_of, beta_at_mark
from .kernels import get_kernel

__all__ = [
    "InferenceError",
    "VarianceBundle",
    "CumulativeCurves",
    "Band",
    "TestReport",
    "variance_bundle",
    "sigma_A_cumulative",
    "cumulative_curves",
    "ve_pointwise_band",
    "cv_pointwise_band",
    "bridge_sup_quantile",
    "cv_simultaneous_band_bridge",
    "multiplier_influence_matrix",
    "multiplier_band",
    "default_test_grid",
    "test_h10",
    "test_h20",
]

MIN_RESAMPLES = 1000
_CHUNK = 200_000


class InferenceError(RuntimeError):
    """Variance or resampling computation cannot proceed."""


def _rng(seed) -> np.random.Generator:
    if seed is None:
        raise InferenceError("a seed is required for resampling (no hidden entropy)")
    return np.random.default_rng(seed)


def _upper_quantile(values: np.ndarray, alpha: float) -> float:
    """Empirical upper-alpha quantile (order statistic ceil((1-alpha) R))."""
    k = math.ceil((1.0 - alpha) * values.size)
    k = min(max(k, 1), values.size)
    return float(np.partition(values, k - 1)[k - 1])


def _exceedance_p(sims: np.ndarray, stat: float) -> float:
    return float((1 + np.sum(sims >= stat)) / (sims.size + 1))


# --------------------------------------------------------------------------- #
# variance bundle
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VarianceBundle:
    """Per-grid-point variance pieces of the local fits.

    ``sandwich`` is information^-1 (squared-kernel information) information^-1,
    the variance of sqrt(nh) (beta_hat - beta); ``scaled_inverse`` is the
    simpler nu_0 information^-1 alternative. ``ok`` marks the grid points where
    the information was invertible.
    """

    grid: np.ndarray
    information: np.ndarray
    squared_kernel_information: np.ndarray
    sandwich: np.ndarray
    scaled_inverse: np.ndarray
    ok: np.ndarray


def variance_bundle(profile: ProfileFit, kernel=None) -> VarianceBundle:
    """Assemble both variance estimators at every converged grid point."""
    kernel = get_kernel(kernel if kernel is not None else profile.config.kernel)
    nu0 = kernel.moment(0, squared=True)
    m, p = profile.grid.size, profile.p
    info = np.full((m, p, p), np.nan)
    sqk = np.full((m, p, p), np.nan)
    sandwich = np.full((m, p, p), np.nan)
    scaled = np.full((m, p, p), np.nan)
    ok = np.zeros(m, dtype=bool)
    for i, fit in enumerate(profile.fits):
        if not fit.converged:
            continue
        info[i] = fit.information
        sqk[i] = fit.squared_kernel_information
        try:
            inv = np.linalg.inv(fit.information)
        except np.linalg.LinAlgError:
            continue
        sandwich[i] = inv @ fit.squared_kernel_information @ inv
        scaled[i] = nu0 * inv
        ok[i] = True
    if not ok.any():
        raise InferenceError("no grid point has an invertible information matrix")
    return VarianceBundle(profile.grid, info, sqk, sandwich, scaled, ok)


# --------------------------------------------------------------------------- #
# A(u)-weighted cumulative covariance of the martingale integral
# --------------------------------------------------------------------------- #


def _information_interpolator(profile: ProfileFit):
    mask = profile.converged_mask
    grid = profile.grid[mask]
    mats = np.stack([f.information for f, keep in zip(profile.fits, mask) if keep])

    def at(us: np.ndarray) -> np.ndarray:
        out = np.empty((us.size, profile.p, profile.p))
        for r in range(profile.p):
            for c in range(profile.p):
                out[:, r, c] = np.interp(us, grid, mats[:, r, c])
        return out

    return at


def _A_matrices(profile: ProfileFit, a_spec, us: np.ndarray) -> np.ndarray:
    """Evaluate the weight matrix A(u) at each mark in ``us``.

    Shipped specs: ``identity``; ``inv_information`` (information(u)^-1);
    ``ve_weighted`` (exp(beta_1(u)) information(u)^-1, the weighting that makes
    e1' Sigma_A e1 estimate the variance of the cumulative efficacy process).
    A callable u -> (p, p) array is also accepted.
    """
    p = profile.p
    if callable(a_spec):
        return np.stack([np.asarray(a_spec(u), dtype=float).reshape(p, p) for u in us])
    if a_spec == "identity":
        return np.broadcast_to(np.eye(p), (us.size, p, p)).copy()
    info_at = _information_interpolator(profile)
    mats = np.linalg.inv(info_at(us))
    if a_spec == "inv_information":
        return mats
    if a_spec == "ve_weighted":
        beta1 = beta_at_mark(profile, us)
        beta1 = beta1[:, 0] if beta1.ndim == 2 else np.atleast_1d(beta1[0])
        return np.exp(beta1)[:, None, None] * mats
    raise InferenceError(f"unknown A spec {a_spec!r}")


def _per_event_stats(design: _Design, event_idx: np.ndarray, betas: np.ndarray):
    """Raw S0, mean covariate, and J matrix at each event's own (time, beta)."""
    n_ev = event_idx.size
    p = design.p
    s0 = np.empty(n_ev)
    zbar = np.empty((n_ev, p))
    jmat = np.empty((n_ev, p, p))
    for out, (e, beta_e) in enumerate(zip(event_idx, betas)):
        raw0, raw1, raw2 = design.sums_at(design.event_times[e], beta_e)
        s0[out] = raw0
        r = raw1 / raw0
        zbar[out] = r
        jmat[out] = raw2 / raw0 - np.outer(r, r)
    return s0, zbar, jmat


def _event_cumulative_terms(dataset, profile, a_spec, design=None):
    """Mark-sorted events in (a, b] with their A J A' / n covariance terms."""
    d = _design_of(dataset, design)
    a, b = profile.config.interval
    sel = np.flatnonzero((d.event_marks > a) & (d.event_marks <= b))
    sel = sel[np.argsort(d.event_marks[sel], kind="stable")]
    marks = d.event_marks[sel]
    if sel.size == 0:
        return marks, np.empty((0, d.p, d.p))
    betas = np.atleast_2d(beta_at_mark(profile, marks))
    _, _, jmat = _per_event_stats(d, sel, betas)
    amats = _A_matrices(profile, a_spec, marks)
    terms = np.einsum("eij,ejk,elk->eil", amats, jmat, amats) / d.n
    return marks, terms


def sigma_A_cumulative(dataset, profile, a_spec, v, design=None) -> np.ndarray:
    """Estimated covariance of the A-weighted martingale integral up to mark v."""
    a, _ = profile.config.interval
    if v < a - 1e-12:
        raise InferenceError(f"mark {v} below the interval start {a}")
    marks, terms = _event_cumulative_terms(dataset, profile, a_spec, design)
    take = marks <= v
    if not take.any():
        return np.zeros((profile.p, profile.p))
    return terms[take].sum(axis=0)


# --------------------------------------------------------------------------- #
# cumulative efficacy curves
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class CumulativeCurves:
    """Cumulative coefficient and efficacy curves plus their variance process.

    Arrays are aligned with ``grid``. ``rho2`` is the estimated variance of
    sqrt(n) (CV_hat - CV) and ``t_hat = rho2 / rho2_b`` the Brownian time
    transform. The object also evaluates every curve exactly at off-grid
    marks: the efficacy curve is interpolated linearly, while rho2 is an exact
    event sum at any mark.
    """

    grid: np.ndarray
    beta: np.ndarray
    b_cum: np.ndarray
    ve: np.ndarray
    cv: np.ndarray
    rho2: np.ndarray
    t_hat: np.ndarray
    n: int
    interval: tuple
    rho2_b: float
    _knots: np.ndarray
    _ve_knots: np.ndarray
    _cv_knots: np.ndarray
    _event_marks: np.ndarray
    _event_rho2_cum: np.ndarray

    @property
    def rho_b(self) -> float:
        return math.sqrt(self.rho2_b)

    def ve_at(self, v):
        return np.interp(v, self._knots, self._ve_knots)

    def cv_at(self, v):
        """Exact integral of the piecewise-linear efficacy curve from a to v."""
        v = np.asarray(v, dtype=float)
        idx = np.clip(np.searchsorted(self._knots, v, side="right") - 1, 0, None)
        x0 = self._knots[idx]
        out = self._cv_knots[idx] + 0.5 * (
            self._ve_knots[idx] + self.ve_at(v)
        ) * (v - x0)
        return out if out.ndim else float(out)

    def rho2_at(self, v):
        v = np.asarray(v, dtype=float)
        pos = np.searchsorted(self._event_marks, v, side="right")
        padded = np.concatenate([[0.0], self._event_rho2_cum])
        out = padded[pos]
        return out if out.ndim else float(out)

    def t_at(self, v):
        return self.rho2_at(v) / self.rho2_b

    def s_at(self, v):
        """Bridge transform rho2 / (rho2(b) + rho2), taking values in [0, 1/2]."""
        r = self.rho2_at(v)
        return r / (self.rho2_b + r)


def cumulative_curves(profile: ProfileFit, bundle: VarianceBundle, dataset: Dataset,
                      design=None) -> CumulativeCurves:
    """Integrate the fitted efficacy curve and build its variance process.

    Requires every grid point to have converged: the cumulative curves are
    integrals over the whole interval and a hole in the profile would silently
    bias them.
    """
    mask = profile.converged_mask
    if not mask.all():
        bad = profile.grid[~mask]
        raise InferenceError(
            "profile has unconverged grid points at "
            + ", ".join(f"{v:g}" for v in bad[:5])
        )
    a, b = profile.config.interval
    grid = profile.grid
    beta = profile.beta_matrix
    ve = 1.0 - np.exp(beta[:, 0])

    knots = np.unique(np.concatenate([[a, b], grid]))
    ve_knots = np.column_stack(
        [np.interp(knots, grid, beta[:, j]) for j in range(profile.p)]
    )
    ve_k = 1.0 - np.exp(ve_knots[:, 0])
    cv_knots = np.concatenate(
        [[0.0], np.cumsum(0.5 * (ve_k[1:] + ve_k[:-1]) * np.diff(knots))]
    )
    b_knots = np.vstack(
        [np.zeros(profile.p),
         np.cumsum(0.5 * (ve_knots[1:] + ve_knots[:-1]) * np.diff(knots)[:, None], axis=0)]
    )

    marks, terms = _event_cumulative_terms(dataset, profile, "ve_weighted", design)
    rho2_cum = np.cumsum(terms[:, 0, 0]) if marks.size else np.empty(0)
    rho2_b = float(rho2_cum[-1]) if marks.size else 0.0
    if rho2_b <= 0:
        raise InferenceError("no observed events with marks inside (a, b]")

    pos = np.searchsorted(marks, grid, side="right")
    rho2_grid = np.concatenate([[0.0], rho2_cum])[pos]

    kidx = np.searchsorted(knots, grid)
    return CumulativeCurves(
        grid=grid,
        beta=beta,
        b_cum=b_knots[kidx],
        ve=ve,
        cv=cv_knots[kidx],
        rho2=rho2_grid,
        t_hat=rho2_grid / rho2_b,
        n=profile.n,
        interval=(a, b),
        rho2_b=rho2_b,
        _knots=knots,
        _ve_knots=ve_k,
        _cv_knots=cv_knots,
        _event_marks=marks,
        _event_rho2_cum=rho2_cum,
    )


# --------------------------------------------------------------------------- #
# confidence bands
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Band:
    """Interval curve: centers with lower/upper limits at each mark."""

    points: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kind: str
    level: float
    crit: float

    def covers(self, truth) -> bool:
        """True when the whole true curve lies inside the band."""
        truth = np.asarray(truth, dtype=float)
        return bool(np.all((self.lower <= truth) & (truth <= self.upper)))

    def to_csv(self, handle) -> None:
        handle.write("v,center,lower,upper,kind,level\n")
        for row in zip(self.points, self.center, self.lower, self.upper):
            handle.write(
                ",".join(repr(float(x)) for x in row)
                + f",{self.kind},{repr(float(self.level))}\n"
            )


def ve_pointwise_band(profile: ProfileFit, bundle: VarianceBundle, alpha: float) -> Band:
    """Pointwise normal band for the efficacy curve 1 - exp(beta_1(v))."""
    if not bundle.ok.all():
        raise InferenceError("variance unavailable at some grid points")
    z = norm.isf(alpha / 2.0)
    beta1 = profile.beta_matrix[:, 0]
    sd = np.sqrt(bundle.sandwich[:, 0, 0])
    half = z * sd * np.exp(beta1) / math.sqrt(profile.n * profile.config.bandwidth)
    center = 1.0 - np.exp(beta1)
    return Band(
        points=profile.grid,
        center=center,
        lower=center - half,
        upper=center + half,
        kind="pointwise-VE",
        level=1.0 - alpha,
        crit=float(z),
    )


def cv_pointwise_band(curves: CumulativeCurves, alpha: float) -> Band:
    """Pointwise normal band for the cumulative efficacy curve."""
    z = norm.isf(alpha / 2.0)
    half = z * np.sqrt(curves.rho2) / math.sqrt(curves.n)
    return Band(
        points=curves.grid,
        center=curves.cv,
        lower=curves.cv - half,
        upper=curves.cv + half,
        kind="pointwise-CV",
        level=1.0 - alpha,
        crit=float(z),
    )


def bridge_sup_quantile(points, alpha: float, R: int, seed) -> float:
    """Upper-alpha quantile of sup_k |B0(s_k)| over a Brownian bridge B0.

    The bridge is evaluated exactly at the requested points via Gaussian
    increments of the underlying Wiener path (B0(s) = W(s) - s W(1)); there is
    no path-discretization error beyond the points themselves.
    """
    if R < MIN_RESAMPLES:
        raise InferenceError(f"need at least {MIN_RESAMPLES} resamples, got {R}")
    rng = _rng(seed)
    s = np.unique(np.asarray(points, dtype=float))
    if s.size == 0 or np.any(s < 0) or np.any(s > 1):
        raise InferenceError("bridge points must lie in [0, 1]")
    deltas = np.diff(np.concatenate([[0.0], s, [1.0]]))
    sd = np.sqrt(deltas)
    maxima = np.empty(R)
    done = 0
    while done < R:
        chunk = min(_CHUNK // max(s.size, 1) + 1, R - done)
        incr = rng.standard_normal((chunk, deltas.size)) * sd
        w = np.cumsum(incr, axis=1)
        bridge = w[:, :-1] - np.outer(w[:, -1], s)
        maxima[done : done + chunk] = np.abs(bridge).max(axis=1)
        done += chunk
    return _upper_quantile(maxima, alpha)


def cv_simultaneous_band_bridge(
    curves: CumulativeCurves, alpha: float, R: int, seed, points=None
) -> Band:
    """Simultaneous band for CV via the Brownian-bridge supremum quantile."""
    pts = np.asarray(points if points is not None else curves.grid, dtype=float)
    u = bridge_sup_quantile(curves.s_at(pts), alpha, R, seed)
    rho2 = curves.rho2_at(pts)
    half = u * (curves.rho2_b + rho2) / (math.sqrt(curves.n) * curves.rho_b)
    center = np.asarray(curves.cv_at(pts))
    return Band(
        points=pts,
        center=center,
        lower=center - half,
        upper=center + half,
        kind="simultaneous-bridge",
        level=1.0 - alpha,
        crit=float(u),
    )


def multiplier_influence_matrix(dataset, profile, points, design=None) -> np.ndarray:
    """Per-subject integrals of the estimated-martingale increments.

    Returns the (n, K) matrix whose column k holds, for each subject, the
    first component of the A-weighted integral of the estimated martingale
    over marks in (a, points_k]. Perturbing the rows with standard normal
    multipliers and averaging by sqrt(n) reproduces the limit process of
    sqrt(n) (CV_hat - CV) conditionally on the data.
    """
    d = _design_of(dataset, design)
    a, b = profile.config.interval
    pts = np.asarray(points, dtype=float)
    sel = np.flatnonzero((d.event_marks > a) & (d.event_marks <= b))
    sel = sel[np.argsort(d.event_marks[sel], kind="stable")]
    marks = d.event_marks[sel]
    betas = np.atleast_2d(beta_at_mark(profile, marks)) if sel.size else np.empty((0, d.p))
    amats = _A_matrices(profile, "ve_weighted", marks) if sel.size else np.empty((0, d.p, d.p))
    s0, zbar, _ = _per_event_stats(d, sel, betas)

    times_all = dataset.times()
    if d.time_fixed:
        z_all = dataset.fixed_covariates()
    w = np.zeros((d.n, pts.size))
    running = np.zeros(d.n)
    next_pt = 0
    order_pts = np.argsort(pts, kind="stable")
    pts_sorted = pts[order_pts]
    for j in range(sel.size + 1):
        mark_j = marks[j] if j < sel.size else np.inf
        while next_pt < pts_sorted.size and pts_sorted[next_pt] < mark_j:
            w[:, order_pts[next_pt]] = running
            next_pt += 1
        if j == sel.size:
            break
        e = sel[j]
        t_j = d.event_times[e]
        beta_j = betas[j]
        a_row = amats[j][0]  # first row of A(V_j)
        if d.time_fixed:
            z_t = z_all
        else:
            z_t = np.array([rec.covariates.at(t_j) for rec in dataset.records])
        r_vec = z_t @ a_row - float(a_row @ zbar[j])
        at_risk = times_all >= t_j
        comp = np.where(at_risk, np.exp(z_t @ beta_j) / s0[j], 0.0) * r_vec
        running = running - comp
        running[d.event_orig[e]] += r_vec[d.event_orig[e]]
    while next_pt < pts_sorted.size:
        w[:, order_pts[next_pt]] = running
        next_pt += 1
    return w


def multiplier_band(
    dataset,
    profile: ProfileFit,
    curves: CumulativeCurves,
    alpha: float,
    R: int,
    seed,
    points=None,
    xi=None,
) -> Band:
    """Simultaneous band for CV with the critical value from normal multipliers.

    Each resample perturbs the per-subject estimated-martingale integrals by
    i.i.d. standard normal weights; the supremum of the same normalized
    process used by the bridge band yields the critical value. ``xi`` may
    supply an explicit (R, n) multiplier matrix (testing hook).
    """
    if R < MIN_RESAMPLES and xi is None:
        raise InferenceError(f"need at least {MIN_RESAMPLES} resamples, got {R}")
    pts = np.asarray(points if points is not None else curves.grid, dtype=float)
    w = multiplier_influence_matrix(dataset, profile, pts)
    n = curves.n
    rho2 = curves.rho2_at(pts)
    scale = curves.rho_b / (curves.rho2_b + rho2)
    if xi is not None:
        xi = np.asarray(xi, dtype=float)
        draws = np.abs((xi @ w) / math.sqrt(n)) * scale
        sups = draws.max(axis=1)
    else:
        rng = _rng(seed)
        sups = np.empty(R)
        done = 0
        rows = max(1, _CHUNK // max(n, 1))
        while done < R:
            chunk = min(rows, R - done)
            gi = rng.standard_normal((chunk, n))
            draws = np.abs((gi @ w) / math.sqrt(n)) * scale
            sups[done : done + chunk] = draws.max(axis=1)
            done += chunk
    u = _upper_quantile(sups, alpha)
    half = u * (curves.rho2_b + rho2) / (math.sqrt(n) * curves.rho_b)
    center = np.asarray(curves.cv_at(pts))
    return Band(
        points=pts,
        center=center,
        lower=center - half,
        upper=center + half,
        kind="simultaneous-multiplier",
        level=1.0 - alpha,
        crit=float(u),
    )


# --------------------------------------------------------------------------- #
# hypothesis tests
# --------------------------------------------------------------------------- #


def default_test_grid(a: float, b: float) -> np.ndarray:
    """Eight evenly spaced points spanning the central 12%..96% of [a, b]."""
    span = b - a
    return np.linspace(a + 0.12 * span, a + 0.96 * span, 8)


@dataclass(frozen=True)
class TestReport:
    """Statistics, critical values, and p-values of one test family."""

    family: str
    statistics: dict
    critical_values: dict
    p_values: dict
    rejected: dict
    grid: np.ndarray
    alpha: float
    resamples: int
    seed: object
    a1: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "statistics": {k: float(v) for k, v in self.statistics.items()},
            "critical_values": {k: float(v) for k, v in self.critical_values.items()},
            "p_values": {k: float(v) for k, v in self.p_values.items()},
            "rejected": {k: bool(v) for k, v in self.rejected.items()},
            "grid": [float(v) for v in self.grid],
            "alpha": float(self.alpha),
            "resamples": int(self.resamples),
            "seed": None if self.seed is None else repr(self.seed),
            "a1": None if self.a1 is None else float(self.a1),
        }


def _prune_grid(points: np.ndarray, t_vals: np.ndarray, t_floor: float):
    """Keep points at which the time transform strictly increases."""
    keep = []
    prev = t_floor
    for i, t in enumerate(t_vals):
        if t > prev:
            keep.append(i)
            prev = t
    return np.asarray(keep, dtype=int)


def _simulate_wiener(rng, t_points: np.ndarray, R: int) -> np.ndarray:
    """Exact Wiener draws at the given ascending time points, (R, K)."""
    deltas = np.diff(np.concatenate([[0.0], t_points]))
    sd = np.sqrt(deltas)
    out = np.empty((R, t_points.size))
    done = 0
    rows = max(1, _CHUNK // max(t_points.size, 1))
    while done < R:
        chunk = min(rows, R - done)
        out[done : done + chunk] = np.cumsum(
            rng.standard_normal((chunk, t_points.size)) * sd, axis=1
        )
        done += chunk
    return out


def test_h10(curves: CumulativeCurves, alpha: float, R: int, seed, grid=None) -> TestReport:
    """Test of zero efficacy over the whole interval, H10: VE(v) = 0.

    T_a integrates the squared normalized cumulative-efficacy process against
    the time transform (general alternatives); T_m1 integrates the process
    itself (monotone alternatives); T_m2 standardizes the grid increments into
    an asymptotically standard normal sum. Critical values for T_a and T_m1
    come from Wiener paths simulated at the same transformed grid points.
    """
    if R < MIN_RESAMPLES:
        raise InferenceError(f"need at least {MIN_RESAMPLES} resamples, got {R}")
    a, b = curves.interval
    pts = np.asarray(grid if grid is not None else default_test_grid(a, b), dtype=float)
    if pts.size < 2:
        raise InferenceError("the test grid needs at least two points")
    if np.any(pts < a) or np.any(pts > b) or np.any(np.diff(pts) <= 0):
        raise InferenceError("test grid must be strictly ascending inside [a, b]")
    t_vals = np.asarray(curves.t_at(pts))
    keep = _prune_grid(pts, t_vals, 0.0)
    if keep.size < 2:
        raise InferenceError("degenerate time transform on the test grid")
    pts, t_vals = pts[keep], t_vals[keep]
    z = math.sqrt(curves.n) * np.asarray(curves.cv_at(pts)) / curves.rho_b
    dt = np.diff(np.concatenate([[0.0], t_vals]))
    t_a = float(np.sum(z**2 * dt))
    t_m1 = float(np.sum(z * dt))
    incr = np.diff(t_vals)
    t_m2 = float(np.sum(np.diff(z) / np.sqrt(incr)) / math.sqrt(pts.size - 1))

    rng = _rng(seed)
    w = _simulate_wiener(rng, t_vals, R)
    sims_a = np.sum(w**2 * dt, axis=1)
    sims_m1 = np.sum(w * dt, axis=1)
    c_a = _upper_quantile(sims_a, alpha)
    c_m1 = _upper_quantile(sims_m1, alpha)
    z_alpha = float(norm.isf(alpha))
    stats = {"T_a": t_a, "T_m1": t_m1, "T_m2": t_m2}
    crit = {"T_a": c_a, "T_m1": c_m1, "T_m2": z_alpha}
    pvals = {
        "T_a": _exceedance_p(sims_a, t_a),
        "T_m1": _exceedance_p(sims_m1, t_m1),
        "T_m2": float(norm.sf(t_m2)),
    }
    rejected = {k: stats[k] > crit[k] for k in stats}
    return TestReport(
        family="H10",
        statistics=stats,
        critical_values=crit,
        p_values=pvals,
        rejected=rejected,
        grid=pts,
        alpha=alpha,
        resamples=R,
        seed=seed,
    )


def _wiener_covariance_h20(pts, t_vals, a, b):
    """Covariance matrix of W(t(v_i))/(v_i - a) - W(1)/(b - a) over the grid."""
    va = pts - a
    ba = b - a
    k = pts.size
    gamma = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            lo, hi = (i, j) if pts[i] <= pts[j] else (j, i)
            gamma[i, j] = (
                t_vals[lo] / (va[lo] * va[hi])
                - t_vals[lo] / (va[lo] * ba)
                - t_vals[hi] / (va[hi] * ba)
                + 1.0 / ba**2
            )
    return gamma


def test_h20(
    curves: CumulativeCurves, a1, alpha: float, R: int, seed, grid=None
) -> TestReport:
    """Test of mark-independent efficacy, H20: VE(v) constant over [a, b].

    The normalized contrast compares the running average of the efficacy curve
    with its whole-interval average; its limit under H20 is a known Wiener
    functional whose covariance over the grid standardizes the increment sum
    T_m2. Critical values for T_a and T_m1 are simulated with the matching
    discretization.
    """
    if R < MIN_RESAMPLES:
        raise InferenceError(f"need at least {MIN_RESAMPLES} resamples, got {R}")
    a, b = curves.interval
    default_grid = default_test_grid(a, b)
    if a1 is None:
        a1 = float(default_grid[0])
    if not (a < a1 < b):
        raise InferenceError(f"a1={a1} must lie strictly inside ({a}, {b})")
    pts = np.asarray(grid if grid is not None else default_grid, dtype=float)
    pts = pts[pts >= a1 - 1e-12]
    if pts.size < 2:
        raise InferenceError("the test grid needs at least two points in [a1, b]")
    if np.any(pts > b) or np.any(np.diff(pts) <= 0):
        raise InferenceError("test grid must be strictly ascending inside [a1, b]")
    t_floor = float(curves.t_at(a1))
    t_vals = np.asarray(curves.t_at(pts))
    keep = _prune_grid(pts, t_vals, t_floor)
    if keep.size < 2:
        raise InferenceError("degenerate time transform on the test grid")
    pts, t_vals = pts[keep], t_vals[keep]

    cv_b = float(curves.cv_at(b))
    z = (
        math.sqrt(curves.n)
        * (np.asarray(curves.cv_at(pts)) / (pts - a) - cv_b / (b - a))
        / curves.rho_b
    )
    dt = np.diff(np.concatenate([[t_floor], t_vals]))
    t_a_stat = float(np.sum(z**2 * dt))
    t_m1 = float(np.sum(z * dt))

    gamma = _wiener_covariance_h20(pts, t_vals, a, b)
    pi2 = np.array(
        [gamma[k - 1, k - 1] - 2 * gamma[k - 1, k] + gamma[k, k] for k in range(1, pts.size)]
    )
    if np.any(pi2 <= 0):
        raise InferenceError("covariance degeneracy: nonpositive increment variance")
    pi = np.sqrt(pi2)
    inv_pi = 1.0 / pi
    xi = np.concatenate([[inv_pi[0]], np.diff(inv_pi), [-inv_pi[-1]]])
    pi_k2 = float(xi @ gamma @ xi)
    if pi_k2 <= 0:
        raise InferenceError("covariance degeneracy: nonpositive total variance")
    t_m2 = float(np.sum(-np.diff(z) * inv_pi) / math.sqrt(pi_k2))

    rng = _rng(seed)
    w = _simulate_wiener(rng, np.concatenate([t_vals, [1.0]]), R)
    z_sim = w[:, :-1] / (pts - a) - w[:, -1:] / (b - a)
    sims_a = np.sum(z_sim**2 * dt, axis=1)
    sims_m1 = np.sum(z_sim * dt, axis=1)
    c_a = _upper_quantile(sims_a, alpha)
    c_m1 = _upper_quantile(sims_m1, alpha)
    z_alpha = float(norm.isf(alpha))
    stats = {"T_a": t_a_stat, "T_m1": t_m1, "T_m2": t_m2}
    crit = {"T_a": c_a, "T_m1": c_m1, "T_m2": z_alpha}
    pvals = {
        "T_a": _exceedance_p(sims_a, t_a_stat),
        "T_m1": _exceedance_p(sims_m1, t_m1),
        "T_m2": float(norm.sf(t_m2)),
    }
    rejected = {k: stats[k] > crit[k] for k in stats}
    return TestReport(
        family="H20",
        statistics=stats,
        critical_values=crit,
        p_values=pvals,
        rejected=rejected,
        grid=pts,
        alpha=alpha,
        resamples=R,
        seed=seed,
        a1=float(a1),
    )
