import dataclasses
import math

import numpy as np
import pytest
from scipy.stats import norm

import markhaz as mh
from markhaz import inference as inf

EPA = mh.Kernel("epanechnikov")


def synthetic_curves(grid, cv_values, rho2_values, rho2_b, n, interval=(0.1, 0.9)):
    """Fabricate a curves object with prescribed CV and rho2 at the grid."""
    a, b = interval
    grid = np.asarray(grid, dtype=float)
    cv_values = np.asarray(cv_values, dtype=float)
    rho2_values = np.asarray(rho2_values, dtype=float)
    knots = np.concatenate([[a], grid, [b]])
    cv_knots = np.concatenate([[0.0], cv_values, [cv_values[-1]]])
    marks = np.concatenate([grid, [b]])
    cum = np.concatenate([rho2_values, [rho2_b]])
    return mh.CumulativeCurves(
        grid=grid,
        beta=np.zeros((grid.size, 1)),
        b_cum=np.zeros((grid.size, 1)),
        ve=np.zeros(grid.size),
        cv=cv_values,
        rho2=rho2_values,
        t_hat=rho2_values / rho2_b,
        n=n,
        interval=interval,
        rho2_b=rho2_b,
        _knots=knots,
        _ve_knots=np.zeros(knots.size),
        _cv_knots=cv_knots,
        _event_marks=marks,
        _event_rho2_cum=cum,
    )


# ----- variance bundle ----------------------------------------------------------


def test_scaled_inverse_is_nu0_times_inverse(m1_fitted):
    _, prof, bundle, _ = m1_fitted
    i = 5
    expected = 0.6 * np.linalg.inv(prof.fits[i].information)
    np.testing.assert_allclose(bundle.scaled_inverse[i], expected, rtol=1e-13)


def test_sandwich_matches_independent_resummation(m1_fitted):
    ds, prof, bundle, _ = m1_fitted
    i = 12
    v = prof.grid[i]
    h = prof.config.bandwidth
    beta = prof.beta_matrix[i]
    info = -mh.local_hessian(ds, v, h, EPA, beta) / ds.n
    marks = ds.marks()
    sq = np.zeros((1, 1))
    for idx in np.flatnonzero(ds.status() == 1):
        w = EPA.scaled(marks[idx] - v, h)
        if w == 0:
            continue
        j = mh.risk_set_sums(ds, ds.times()[idx], beta).j_matrix
        sq += (h / ds.n) * w**2 * j
    inv = np.linalg.inv(info)
    np.testing.assert_allclose(bundle.sandwich[i], inv @ sq @ inv, atol=1e-12)


def test_variance_bundle_requires_converged_points(forced_zero_profile):
    prof = forced_zero_profile()
    bundle = mh.variance_bundle(prof)
    assert bundle.ok.all()
    np.testing.assert_allclose(bundle.sandwich[0], np.eye(1))


# ----- A-weighted cumulative covariance -----------------------------------------


def test_sigma_A_zero_at_interval_start(m1_fitted):
    ds, prof, _, _ = m1_fitted
    out = mh.sigma_A_cumulative(ds, prof, "identity", 0.1)
    np.testing.assert_array_equal(out, np.zeros((1, 1)))


def test_sigma_A_single_event_hand_value(forced_zero_profile):
    # one event at (X=1, V=0.5); at that time the risk set holds covariates
    # {1, 0}, so with beta=0 the J matrix is 0.25 and the term is 0.25 / 3
    ds = mh.Dataset.from_arrays(
        [0.5, 1.0, 2.0], [0, 1, 0], [np.nan, 0.5, np.nan], [[5.0], [1.0], [0.0]]
    )
    prof = forced_zero_profile()
    out = mh.sigma_A_cumulative(ds, prof, "identity", 0.6)
    assert out[0, 0] == pytest.approx(0.25 / 3.0, abs=1e-15)


def test_sigma_A_additive_over_mark_intervals(m1_fitted):
    ds, prof, _, _ = m1_fitted
    full = mh.sigma_A_cumulative(ds, prof, "ve_weighted", 0.8)
    left = mh.sigma_A_cumulative(ds, prof, "ve_weighted", 0.45)
    marks, terms = inf._event_cumulative_terms(ds, prof, "ve_weighted")
    middle = terms[(marks > 0.45) & (marks <= 0.8)].sum(axis=0)
    np.testing.assert_allclose(left + middle, full, atol=1e-15)
    with pytest.raises(inf.InferenceError):
        mh.sigma_A_cumulative(ds, prof, "identity", 0.05)


# ----- cumulative curves --------------------------------------------------------


def test_constant_ve_integrates_exactly():
    # beta pinned so that the efficacy curve is the constant 0.3
    beta_val = math.log(1.0 - 0.3)
    grid = np.linspace(0.1, 0.9, 9)
    cfg = mh.AnalysisConfig(bandwidth=0.2, grid=grid)
    fits = tuple(
        mh.LocalFit(v, np.array([beta_val]), np.eye(1), np.eye(1), True, 0, 0.0)
        for v in grid
    )
    prof = mh.ProfileFit(grid=grid, fits=fits, config=cfg, n=50, p=1)
    ds = mh.sample_mark13(mh.SimModelSpec.from_name("m1"), 50, 3)
    bundle = mh.variance_bundle(prof)
    curves = mh.cumulative_curves(prof, bundle, ds)
    for v in (0.25, 0.5, 0.9):
        assert curves.cv_at(v) == pytest.approx(0.3 * (v - 0.1), abs=1e-12)


def test_curves_invariants(m1_fitted):
    _, _, _, curves = m1_fitted
    assert curves.t_hat[-1] == pytest.approx(1.0, abs=1e-15)
    assert curves.t_at(0.9) == 1.0
    assert np.all(np.diff(curves.rho2) >= 0)
    assert np.all(np.diff(curves.t_hat) >= 0)
    assert curves.rho2[0] == 0.0
    assert np.all(curves.ve < 1.0)


def test_curves_need_events_inside_interval():
    # all marks below the interval start: the variance process is empty
    ds = mh.Dataset.from_arrays(
        [1.0, 1.5, 2.0, 2.5],
        [1, 1, 1, 0],
        [0.12, 0.13, 0.14, np.nan],
        [[1.0], [0.0], [1.0], [0.0]],
    )
    cfg = mh.AnalysisConfig(bandwidth=0.4, interval=(0.2, 0.5), grid=3)
    prof = mh.fit_profile(ds, cfg)
    bundle = mh.variance_bundle(prof)
    with pytest.raises(inf.InferenceError, match="no observed events"):
        mh.cumulative_curves(prof, bundle, ds)


# ----- bands --------------------------------------------------------------------


def test_normal_quantile_value():
    assert norm.isf(0.025) == pytest.approx(1.959964, abs=1e-6)


def test_ve_band_at_zero_beta(forced_zero_profile):
    prof = forced_zero_profile(n=100, h=0.25)
    bundle = mh.variance_bundle(prof)
    band = mh.ve_pointwise_band(prof, bundle, 0.05)
    np.testing.assert_array_equal(band.center, 0.0)
    half = norm.isf(0.025) / math.sqrt(100 * 0.25)
    np.testing.assert_allclose(band.upper, half, rtol=1e-12)
    assert np.all(band.lower <= band.center) and np.all(band.center <= band.upper)


def test_cv_band_degenerate_at_start(m1_fitted):
    _, _, _, curves = m1_fitted
    band = mh.cv_pointwise_band(curves, 0.05)
    assert band.lower[0] == band.center[0] == band.upper[0]
    widths = band.upper - band.lower
    assert np.all(np.diff(widths) >= -1e-15)
    narrow = mh.cv_pointwise_band(curves, 0.32)
    assert np.all(
        (narrow.upper - narrow.lower)[1:] < (band.upper - band.lower)[1:]
    )


def test_bridge_single_point_analytic():
    for s in (0.1, 0.3, 0.5):
        u = mh.bridge_sup_quantile([s], 0.05, 100_000, 42)
        assert u == pytest.approx(norm.isf(0.025) * math.sqrt(s * (1 - s)), abs=0.02)
    # duplicated points reduce to the single-point case
    u1 = mh.bridge_sup_quantile([0.3], 0.05, 10_000, 7)
    u2 = mh.bridge_sup_quantile([0.3, 0.3, 0.3], 0.05, 10_000, 7)
    assert u1 == u2


def test_bridge_dense_grid_matches_fine_simulation():
    # reference value 1.2602 from an independent fine-discretization run
    # (1e6 paths, 2048 steps, seed 905) of sup over [0, 1/2] of |B0|
    s = np.linspace(0.0, 0.5, 1025)
    u = mh.bridge_sup_quantile(s, 0.05, 100_000, 99)
    assert u == pytest.approx(1.2602, abs=0.02)


def test_bridge_quantile_monotone_and_deterministic():
    s = np.linspace(0.05, 0.5, 10)
    u01 = mh.bridge_sup_quantile(s, 0.01, 20_000, 5)
    u05 = mh.bridge_sup_quantile(s, 0.05, 20_000, 5)
    u10 = mh.bridge_sup_quantile(s, 0.10, 20_000, 5)
    assert u01 > u05 > u10
    assert mh.bridge_sup_quantile(s, 0.05, 20_000, 5) == u05
    with pytest.raises(inf.InferenceError):
        mh.bridge_sup_quantile(s, 0.05, 500, 5)


def test_simultaneous_band_at_endpoint_only(m1_fitted):
    # with the single point b the sup is |B0(1/2)|, so the band collapses to
    # the pointwise one: u = z_{alpha/2} / 2 and half-width z rho(b) / sqrt(n)
    _, _, _, curves = m1_fitted
    band = mh.cv_simultaneous_band_bridge(curves, 0.05, 100_000, 11, points=[0.9])
    pointwise_half = norm.isf(0.025) * curves.rho_b / math.sqrt(curves.n)
    half = band.upper[0] - band.center[0]
    assert half == pytest.approx(pointwise_half, rel=0.02)


def test_simultaneous_band_dominates_pointwise_at_b(m1_fitted):
    _, _, _, curves = m1_fitted
    sim = mh.cv_simultaneous_band_bridge(curves, 0.05, 20_000, 3)
    pw = mh.cv_pointwise_band(curves, 0.05)
    assert sim.crit >= norm.isf(0.025) / 2.0
    assert (sim.upper[-1] - sim.center[-1]) >= (pw.upper[-1] - pw.center[-1]) - 1e-12
    assert np.all(sim.lower <= sim.center) and np.all(sim.center <= sim.upper)


# ----- multiplier resampling ----------------------------------------------------


def test_multiplier_zero_weights_hook(m1_fitted):
    ds, prof, _, curves = m1_fitted
    xi = np.zeros((64, ds.n))
    band = mh.multiplier_band(ds, prof, curves, 0.05, 64, None, xi=xi)
    np.testing.assert_array_equal(band.upper, band.center)
    assert band.crit == 0.0


def test_multiplier_conditional_variance_identity():
    ds = mh.sample_mark13(mh.SimModelSpec.from_name("m1"), 800, 3)
    cfg = mh.AnalysisConfig(bandwidth=0.1, seed=1)
    prof = mh.fit_profile(ds, cfg)
    bundle = mh.variance_bundle(prof)
    curves = mh.cumulative_curves(prof, bundle, ds)
    pts = np.array([0.3, 0.5, 0.7, 0.9])
    w = mh.multiplier_influence_matrix(ds, prof, pts)
    conditional = (w**2).sum(axis=0) / ds.n
    rng = np.random.default_rng(8)
    draws = (rng.standard_normal((10_000, ds.n)) @ w) / math.sqrt(ds.n)
    empirical = draws.var(axis=0)
    np.testing.assert_allclose(empirical, conditional, rtol=0.04)
    np.testing.assert_allclose(empirical, curves.rho2_at(pts), rtol=0.05)


def test_multiplier_and_bridge_agree(m1_fitted):
    ds, prof, _, curves = m1_fitted
    bridge = mh.cv_simultaneous_band_bridge(curves, 0.05, 10_000, 21)
    mult = mh.multiplier_band(ds, prof, curves, 0.05, 10_000, 22)
    assert mult.crit == pytest.approx(bridge.crit, rel=0.10)


# ----- zero-efficacy test family ------------------------------------------------


def test_h10_null_inputs_give_zero_statistics():
    curves = synthetic_curves(
        grid=[0.3, 0.5, 0.7],
        cv_values=[0.0, 0.0, 0.0],
        rho2_values=[0.25, 0.5, 0.75],
        rho2_b=1.0,
        n=100,
    )
    rep = mh.test_h10(curves, 0.05, 2000, 1, grid=[0.3, 0.5, 0.7])
    assert rep.statistics == {"T_a": 0.0, "T_m1": 0.0, "T_m2": 0.0}
    assert not any(rep.rejected.values())


def test_h10_hand_computed_statistics():
    # Z = 2 sqrt(t) at t = (1/4, 1/2, 3/4) with equal increments 1/4
    z_vals = 2.0 * np.sqrt([0.25, 0.5, 0.75])
    curves = synthetic_curves(
        grid=[0.3, 0.5, 0.7],
        cv_values=z_vals / 10.0,  # n = 100, rho(b) = 1
        rho2_values=[0.25, 0.5, 0.75],
        rho2_b=1.0,
        n=100,
    )
    rep = mh.test_h10(curves, 0.05, 2000, 1, grid=[0.3, 0.5, 0.7])
    assert rep.statistics["T_a"] == pytest.approx(1.5, abs=1e-12)
    assert rep.statistics["T_m1"] == pytest.approx(
        0.25 * z_vals.sum(), abs=1e-12
    )
    expected_m2 = 2.0 * (math.sqrt(0.75) - 0.5) / (0.5 * math.sqrt(2.0))
    assert rep.statistics["T_m2"] == pytest.approx(expected_m2, abs=1e-12)


def test_h10_deterministic_and_grid_validation(m1_fitted):
    _, _, _, curves = m1_fitted
    r1 = mh.test_h10(curves, 0.05, 2000, 9)
    r2 = mh.test_h10(curves, 0.05, 2000, 9)
    assert r1.statistics == r2.statistics
    assert r1.critical_values == r2.critical_values
    assert r1.p_values == r2.p_values
    with pytest.raises(inf.InferenceError, match="two points"):
        mh.test_h10(curves, 0.05, 2000, 9, grid=[0.5])
    with pytest.raises(inf.InferenceError, match="resamples"):
        mh.test_h10(curves, 0.05, 100, 9)


def test_h10_degenerate_transform():
    curves = synthetic_curves(
        grid=[0.3, 0.5, 0.7],
        cv_values=[0.01, 0.02, 0.03],
        rho2_values=[0.5, 0.5, 0.5],  # flat: no events between grid points
        rho2_b=1.0,
        n=100,
    )
    with pytest.raises(inf.InferenceError, match="degenerate"):
        mh.test_h10(curves, 0.05, 2000, 1, grid=[0.3, 0.5, 0.7])


def test_h10_prunes_zero_increment_points(m1_fitted):
    _, _, _, curves = m1_fitted
    # duplicate information between two nearby points is pruned, not fatal
    grid = [0.3, 0.3001, 0.5, 0.7]
    rep = mh.test_h10(curves, 0.05, 2000, 9, grid=grid)
    assert rep.grid.size >= 3


# ----- constant-efficacy test family --------------------------------------------


def test_h20_covariance_hand_values():
    # linear time transform on [0, 1]: tau(0.5, 0.5) = 1, tau(0.5, 0.75) = 1/3,
    # and the increment variance for the pair is 2/3
    gamma = inf._wiener_covariance_h20(
        np.array([0.5, 0.75]), np.array([0.5, 0.75]), 0.0, 1.0
    )
    assert gamma[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert gamma[0, 1] == pytest.approx(1.0 / 3.0, abs=1e-12)
    pi2 = gamma[0, 0] - 2 * gamma[0, 1] + gamma[1, 1]
    assert pi2 == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_h20_default_a1_is_first_grid_point(m1_fitted):
    _, _, _, curves = m1_fitted
    rep = mh.test_h20(curves, None, 0.05, 2000, 4)
    assert rep.a1 == pytest.approx(mh.default_test_grid(0.1, 0.9)[0])
    assert set(rep.statistics) == {"T_a", "T_m1", "T_m2"}
    assert all(0.0 <= p <= 1.0 for p in rep.p_values.values())


def test_h20_bad_a1(m1_fitted):
    _, _, _, curves = m1_fitted
    with pytest.raises(inf.InferenceError, match="a1"):
        mh.test_h20(curves, 0.05, 0.05, 2000, 4)


def test_h20_tm2_scale_invariance(m1_fitted):
    # scaling CV by 2 and the variance process by 4 (with the b-normalizer
    # held fixed) doubles Z and the increment scale together: T_m2 is exact
    _, _, _, curves = m1_fitted
    scaled = dataclasses.replace(
        curves,
        cv=2.0 * curves.cv,
        rho2=4.0 * curves.rho2,
        t_hat=4.0 * curves.t_hat,
        _cv_knots=2.0 * curves._cv_knots,
        _ve_knots=2.0 * curves._ve_knots,
        _event_rho2_cum=4.0 * curves._event_rho2_cum,
    )
    base = mh.test_h10(curves, 0.05, 1000, 3)
    doubled = mh.test_h10(scaled, 0.05, 1000, 3)
    assert doubled.statistics["T_m2"] == base.statistics["T_m2"]


def test_report_serializes(m1_fitted):
    import json

    _, _, _, curves = m1_fitted
    rep = mh.test_h20(curves, None, 0.05, 2000, 4)
    payload = json.dumps(rep.to_dict())
    back = json.loads(payload)
    assert back["family"] == "H20"
    assert len(back["grid"]) == rep.grid.size
