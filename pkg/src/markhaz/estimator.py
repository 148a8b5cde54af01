"""Kernel-local partial-likelihood estimation of mark-varying coefficients.

The regression coefficient beta(v) of the proportional hazards model with a
continuous mark is estimated at each grid point v by Newton-Raphson
maximization of a kernel-weighted log partial likelihood: every observed
failure contributes its ordinary Cox term, weighted by K_h(V_i - v). The
module also provides the risk-set moment sums, the doubly cumulative baseline
estimator, and the ordinary (mark-free) Cox fit used by the marginal Wald
test.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import AnalysisConfig, Dataset
from .kernels import Kernel, get_kernel

__all__ = [
    "EstimationError",
    "EmptyWindowError",
    "NonconvergenceError",
    "SingularHessianError",
    "DivergenceError",
    "RiskSetSums",
    "LocalFit",
    "ProfileFit",
    "BaselineSurface",
    "FitOptions",
    "CoxFit",
    "risk_set_sums",
    "local_loglik",
    "local_score",
    "local_hessian",
    "fit_at",
    "fit_profile",
    "beta_at_mark",
    "baseline_surface",
    "baseline_cumulative",
    "cox_fit",
]


class EstimationError(RuntimeError):
    """Base class for likelihood-maximization failures."""


class EmptyWindowError(EstimationError):
    """No event mark receives positive kernel weight at the requested point."""


class NonconvergenceError(EstimationError):
    """Newton-Raphson failed to reach the score tolerance."""


class SingularHessianError(EstimationError):
    """The Newton step could not be solved."""


class DivergenceError(EstimationError):
    """Monotone likelihood: the maximizer runs away beyond the coefficient cap."""


@dataclass(frozen=True)
class RiskSetSums:
    """n-normalized risk-set moment sums at a fixed (t, beta).

    ``s0`` is the mean of Y_i(t) exp(beta' Z_i(t)); ``s1`` and ``s2`` carry the
    same weights times Z_i(t) and Z_i(t) Z_i(t)'.
    """

    s0: float
    s1: np.ndarray
    s2: np.ndarray

    @property
    def zbar(self) -> np.ndarray:
        return self.s1 / self.s0

    @property
    def j_matrix(self) -> np.ndarray:
        r = self.s1 / self.s0
        return self.s2 / self.s0 - np.outer(r, r)


@dataclass(frozen=True)
class FitOptions:
    """Newton-Raphson settings for one local fit."""

    max_iter: int = 50
    tol: float = 1e-9
    init: Optional[np.ndarray] = None
    beta_cap: float = 50.0
    max_halvings: int = 40


@dataclass(frozen=True)
class LocalFit:
    """Fitted coefficient at one mark with its curvature information.

    ``information`` is minus the local Hessian over n at the solution;
    ``squared_kernel_information`` is the matching sum with squared kernel
    weights times h over n (the meat of the sandwich variance).
    """

    v: float
    beta_hat: np.ndarray
    information: np.ndarray
    squared_kernel_information: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    message: str = ""


@dataclass(frozen=True)
class ProfileFit:
    """Local fits over an ascending mark grid, plus the settings that made them."""

    grid: np.ndarray
    fits: tuple
    config: AnalysisConfig
    n: int
    p: int

    @property
    def converged_mask(self) -> np.ndarray:
        return np.array([f.converged for f in self.fits], dtype=bool)

    @property
    def beta_matrix(self) -> np.ndarray:
        """(m, p) matrix of estimates, NaN rows where the fit failed."""
        return np.vstack([f.beta_hat for f in self.fits])

    def beta_at(self, u):
        return beta_at_mark(self, u)

    def to_csv(self, handle) -> None:
        """One row per grid point: v, beta components, information diagonal, flags."""
        p = self.p
        cols = (
            ["v"]
            + [f"beta_{j+1}" for j in range(p)]
            + [f"information_{j+1}" for j in range(p)]
            + ["converged", "iterations"]
        )
        handle.write(",".join(cols) + "\n")
        for f in self.fits:
            row = (
                [repr(float(f.v))]
                + [repr(float(x)) for x in f.beta_hat]
                + [repr(float(f.information[j, j])) for j in range(p)]
                + [str(int(f.converged)), str(f.iterations)]
            )
            handle.write(",".join(row) + "\n")


@dataclass(frozen=True)
class BaselineSurface:
    """Jump list of the doubly cumulative baseline estimator.

    One jump per observed failure with mark inside (a, b], carrying mass
    1 / (n S0(X_i, beta(V_i))) at (X_i, V_i). Jumps are sorted by time, ties
    in input order.
    """

    times: np.ndarray
    marks: np.ndarray
    increments: np.ndarray
    interval: tuple

    def cumulative(self, t: float, v: float) -> float:
        """Mass accumulated over times <= t and marks in (a, v]."""
        a = self.interval[0]
        mask = (self.times <= t) & (self.marks <= v) & (self.marks > a)
        return float(self.increments[mask].sum())


class _Design:
    """Sorted-by-time arrays and suffix machinery behind all risk-set sums."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.n = dataset.n
        self.p = dataset.p
        times = dataset.times()
        status = dataset.status()
        marks = dataset.marks()
        order = np.argsort(times, kind="stable")
        self.x_sorted = times[order]
        self.order = order
        self.time_fixed = dataset.time_fixed
        ev = np.flatnonzero(status == 1)
        self.event_orig = ev
        self.event_times = times[ev]
        self.event_marks = marks[ev]
        self.event_i0 = np.searchsorted(self.x_sorted, self.event_times, side="left")
        # position of each subject in the time-sorted frame
        self.rank_of = np.empty(self.n, dtype=int)
        self.rank_of[order] = np.arange(self.n)
        if self.time_fixed:
            z = dataset.fixed_covariates()
            self.z_sorted = z[order]
            self.zz_sorted = np.einsum("ni,nj->nij", self.z_sorted, self.z_sorted)
            self.event_z = z[ev]
        else:
            # covariates evaluated at every event time, subjects in sorted order
            paths = [dataset.records[i].covariates for i in order]
            self.z_at_event = np.empty((ev.size, self.n, self.p))
            for e, t in enumerate(self.event_times):
                for k, path in enumerate(paths):
                    self.z_at_event[e, k] = path.at(t)
            self.event_z = np.array(
                [dataset.records[i].covariates.at(times[i]) for i in ev]
            )

    # ----- sums over the risk set -------------------------------------------------

    def sums_at(self, t: float, beta: np.ndarray):
        """Raw (not n-normalized) risk-set sums at an arbitrary time."""
        i0 = int(np.searchsorted(self.x_sorted, t, side="left"))
        if i0 >= self.n:
            raise EstimationError(f"empty risk set at t={t}")
        if self.time_fixed:
            z = self.z_sorted[i0:]
        else:
            z = np.array(
                [self.dataset.records[i].covariates.at(t) for i in self.order[i0:]]
            )
        w = np.exp(z @ beta)
        s0 = float(w.sum())
        s1 = w @ z
        s2 = np.einsum("n,ni,nj->ij", w, z, z)
        return s0, s1, s2

    def event_eval(self, beta: np.ndarray, active: np.ndarray):
        """Per active event: linear predictor, log raw S0, mean covariate, J matrix.

        Uses reversed cumulative sums in the time-sorted frame so one pass
        serves every event, with a global exponent shift for stability.
        """
        if self.time_fixed:
            eta = self.z_sorted @ beta
            shift = float(eta.max())
            w = np.exp(eta - shift)
            s0c = np.cumsum(w[::-1])[::-1]
            s1c = np.cumsum((w[:, None] * self.z_sorted)[::-1], axis=0)[::-1]
            s2c = np.cumsum((w[:, None, None] * self.zz_sorted)[::-1], axis=0)[::-1]
            i0 = self.event_i0[active]
            s0 = s0c[i0]
            zbar = s1c[i0] / s0[:, None]
            j = s2c[i0] / s0[:, None, None] - np.einsum("ei,ej->eij", zbar, zbar)
            log_s0_raw = shift + np.log(s0)
            eta_event = self.event_z[active] @ beta
            return eta_event, log_s0_raw, zbar, j
        idx = np.flatnonzero(active)
        eta_event = self.event_z[idx] @ beta
        log_s0_raw = np.empty(idx.size)
        zbar = np.empty((idx.size, self.p))
        j = np.empty((idx.size, self.p, self.p))
        for out, e in enumerate(idx):
            z = self.z_at_event[e, self.event_i0[e]:]
            eta = z @ beta
            shift = float(eta.max())
            w = np.exp(eta - shift)
            s0 = float(w.sum())
            log_s0_raw[out] = shift + np.log(s0)
            r = (w @ z) / s0
            zbar[out] = r
            j[out] = np.einsum("n,ni,nj->ij", w, z, z) / s0 - np.outer(r, r)
        return eta_event, log_s0_raw, zbar, j


def _design_of(dataset, design=None) -> _Design:
    return design if design is not None else _Design(dataset)


def risk_set_sums(dataset: Dataset, t: float, beta, design=None) -> RiskSetSums:
    """Exact n-normalized moment sums over the risk set at time t."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    d = _design_of(dataset, design)
    s0, s1, s2 = d.sums_at(t, beta)
    n = d.n
    return RiskSetSums(s0 / n, s1 / n, s2 / n)


def _weights(design: _Design, v: float, h: float, kernel: Kernel) -> np.ndarray:
    return np.asarray(kernel.scaled(design.event_marks - v, h))


def local_loglik(dataset, v, h, kernel, beta, design=None) -> float:
    """Kernel-weighted log partial likelihood at mark v."""
    kernel = get_kernel(kernel)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    d = _design_of(dataset, design)
    k = _weights(d, v, h, kernel)
    active = k > 0
    if not active.any():
        return 0.0
    eta, log_s0, _, _ = d.event_eval(beta, active)
    return float(np.sum(k[active] * (eta - log_s0)))


def local_score(dataset, v, h, kernel, beta, design=None) -> np.ndarray:
    """Gradient of the local log partial likelihood."""
    kernel = get_kernel(kernel)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    d = _design_of(dataset, design)
    k = _weights(d, v, h, kernel)
    active = k > 0
    if not active.any():
        return np.zeros(d.p)
    _, _, zbar, _ = d.event_eval(beta, active)
    if d.time_fixed:
        z_event = d.event_z[active]
    else:
        z_event = d.event_z[np.flatnonzero(active)]
    return k[active] @ (z_event - zbar)


def local_hessian(dataset, v, h, kernel, beta, design=None) -> np.ndarray:
    """Second derivative matrix of the local log partial likelihood."""
    kernel = get_kernel(kernel)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    d = _design_of(dataset, design)
    k = _weights(d, v, h, kernel)
    active = k > 0
    if not active.any():
        return np.zeros((d.p, d.p))
    _, _, _, j = d.event_eval(beta, active)
    return -np.einsum("e,eij->ij", k[active], j)


def _newton(design: _Design, weights: np.ndarray, options: FitOptions):
    """Maximize the weighted partial likelihood; returns (beta, iters, score, J-parts)."""
    active = weights > 0
    if not active.any():
        raise EmptyWindowError("no event mark receives positive kernel weight")
    k = weights[active]
    if design.time_fixed:
        z_event = design.event_z[active]
    else:
        z_event = design.event_z[np.flatnonzero(active)]
    p = design.p

    def evaluate(beta):
        eta, log_s0, zbar, j = design.event_eval(beta, active)
        ll = float(np.sum(k * (eta - log_s0)))
        score = k @ (z_event - zbar)
        hess = -np.einsum("e,eij->ij", k, j)
        return ll, score, hess, j

    def assert_not_monotone(beta, score, hess):
        # A vanishing score only certifies a maximizer if the curvature has
        # not collapsed with it: when the would-be next Newton increment is
        # still macroscopic, the likelihood is flattening along a ray and the
        # maximizer sits at infinity.
        try:
            residual_step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            residual_step, *_ = np.linalg.lstsq(-hess, score, rcond=None)
        if np.max(np.abs(residual_step)) > 1e-3:
            raise DivergenceError(
                "score vanished but the curvature collapsed with it "
                f"(next increment {np.max(np.abs(residual_step)):.3g}); "
                "the weighted likelihood looks monotone"
            )

    beta = (
        np.zeros(p)
        if options.init is None
        else np.array(options.init, dtype=float).reshape(p)
    )
    ll, score, hess, j = evaluate(beta)
    iterations = 0
    while np.max(np.abs(score)) > options.tol:
        if iterations >= options.max_iter:
            raise NonconvergenceError(
                f"score norm {np.max(np.abs(score)):.3e} after "
                f"{options.max_iter} iterations"
            )
        try:
            step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            raise SingularHessianError("Newton step unsolvable") from None
        lam = 1.0
        accepted = None
        for _ in range(options.max_halvings):
            cand = beta + lam * step
            trial = evaluate(cand)
            if np.isfinite(trial[0]) and trial[0] >= ll - 1e-10 * (1.0 + abs(ll)):
                accepted = (cand, trial)
                break
            lam *= 0.5
        if accepted is None:
            raise NonconvergenceError(
                "no likelihood increase along the Newton direction"
            )
        beta, (ll, score, hess, j) = accepted
        iterations += 1
        if np.max(np.abs(beta)) > options.beta_cap:
            raise DivergenceError(
                "coefficient ran past the cap "
                f"{options.beta_cap:g}; the weighted likelihood looks monotone"
            )
    if np.any(score):
        assert_not_monotone(beta, score, hess)
    return beta, iterations, float(np.max(np.abs(score))), hess, j, k, active


def fit_at(dataset, v, h, kernel, options: FitOptions | None = None, design=None) -> LocalFit:
    """Newton-Raphson fit of the local coefficient at one mark."""
    kernel = get_kernel(kernel)
    options = options or FitOptions()
    d = _design_of(dataset, design)
    weights = _weights(d, v, h, kernel)
    beta, iterations, score_norm, hess, j, k, active = _newton(d, weights, options)
    n = d.n
    information = -hess / n
    k2 = weights[active] ** 2
    squared = (h / n) * np.einsum("e,eij->ij", k2, j)
    return LocalFit(
        v=float(v),
        beta_hat=beta,
        information=information,
        squared_kernel_information=squared,
        converged=True,
        iterations=iterations,
        score_norm=score_norm,
    )


def _failed_fit(v, p, exc) -> LocalFit:
    nan_vec = np.full(p, np.nan)
    nan_mat = np.full((p, p), np.nan)
    return LocalFit(
        v=float(v),
        beta_hat=nan_vec,
        information=nan_mat,
        squared_kernel_information=nan_mat,
        converged=False,
        iterations=0,
        score_norm=np.inf,
        message=f"{type(exc).__name__}: {exc}",
    )


def fit_profile(
    dataset: Dataset,
    config: AnalysisConfig,
    options: FitOptions | None = None,
    warm_start: bool = True,
) -> ProfileFit:
    """Fit the coefficient curve over the config grid.

    Each point warm-starts from the previous solution (the coefficient curve
    is continuous, so neighbours are close). Per-point failures are recorded
    on the returned object instead of aborting the sweep.
    """
    options = options or FitOptions()
    design = _Design(dataset)
    grid = config.grid_points()
    kernel = get_kernel(config.kernel)
    fits = []
    prev = options.init
    for v in grid:
        opts = replace(options, init=prev)
        try:
            fit = fit_at(dataset, v, config.bandwidth, kernel, opts, design=design)
            if warm_start:
                prev = fit.beta_hat
        except EstimationError as exc:
            fit = _failed_fit(v, design.p, exc)
        fits.append(fit)
    if not any(f.converged for f in fits):
        raise EstimationError(
            "all grid points failed: " + "; ".join(f.message for f in fits[:3])
        )
    return ProfileFit(
        grid=grid, fits=tuple(fits), config=config, n=design.n, p=design.p
    )


def beta_at_mark(profile: ProfileFit, u) -> np.ndarray:
    """Coefficient at an arbitrary mark inside [a, b].

    Linear interpolation between converged grid points, clamped to the
    endpoint values between the grid edge and the interval edge.
    """
    a, b = profile.config.interval
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u_arr < a - 1e-12) or np.any(u_arr > b + 1e-12):
        raise ValueError(f"mark outside the analysis interval [{a}, {b}]")
    mask = profile.converged_mask
    if not mask.any():
        raise EstimationError("no converged grid points to interpolate")
    grid = profile.grid[mask]
    betas = profile.beta_matrix[mask]
    out = np.column_stack(
        [np.interp(u_arr, grid, betas[:, jcol]) for jcol in range(profile.p)]
    )
    return out[0] if np.isscalar(u) or np.ndim(u) == 0 else out


def baseline_surface(dataset: Dataset, profile: ProfileFit, design=None) -> BaselineSurface:
    """Jump list of the doubly cumulative baseline over marks in (a, b]."""
    d = _design_of(dataset, design)
    a, b = profile.config.interval
    sel = np.flatnonzero((d.event_marks > a) & (d.event_marks <= b))
    order = sel[np.argsort(d.event_times[sel], kind="stable")]
    times = d.event_times[order]
    marks = d.event_marks[order]
    betas = beta_at_mark(profile, marks) if order.size else np.empty((0, d.p))
    increments = np.empty(order.size)
    for out, (e, beta_e) in enumerate(zip(order, betas)):
        s0_raw, _, _ = d.sums_at(d.event_times[e], beta_e)
        increments[out] = 1.0 / s0_raw
    return BaselineSurface(times, marks, increments, (a, b))


def baseline_cumulative(dataset, profile, t, v, surface=None) -> float:
    """Doubly cumulative baseline mass over [0, t] x (a, v]."""
    if surface is None:
        surface = baseline_surface(dataset, profile)
    return surface.cumulative(t, v)


@dataclass(frozen=True)
class CoxFit:
    """Ordinary (mark-free) Cox partial-likelihood fit."""

    beta: np.ndarray
    covariance: np.ndarray
    wald_z: np.ndarray
    iterations: int
    score_norm: float


def cox_fit(dataset: Dataset, options: FitOptions | None = None, design=None) -> CoxFit:
    """Maximize the ordinary Cox partial likelihood (all events, unit weights)."""
    options = options or FitOptions()
    d = _design_of(dataset, design)
    if d.event_times.size == 0:
        raise EstimationError("no observed events")
    weights = np.ones(d.event_times.size)
    beta, iterations, score_norm, hess, _, _, _ = _newton(d, weights, options)
    neg_hess = -hess
    try:
        covariance = np.linalg.inv(neg_hess)
    except np.linalg.LinAlgError:
        covariance = np.linalg.pinv(neg_hess)
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    return CoxFit(
        beta=beta,
        covariance=covariance,
        wald_z=z,
        iterations=iterations,
        score_norm=score_norm,
    )
