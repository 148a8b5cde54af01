import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import ks_2samp, kstest

import markhaz as mh
from markhaz.simulate import MODEL_TABLE, SimulationError


def test_model_table_values():
    m2 = mh.SimModelSpec.from_name("m2")
    assert (m2.alpha, m2.beta, m2.gamma) == (-0.5, 0.5, 0.3)
    assert MODEL_TABLE["m5"] == (-0.69, 0.0, 0.3)
    with pytest.raises(ValueError):
        mh.SimModelSpec.from_name("m9")


def test_arm_rate_matches_quadrature():
    spec = mh.SimModelSpec.from_name("m1")
    numeric, _ = quad(lambda v: math.exp(0.3 * v), 0.0, 1.0, epsabs=1e-12)
    assert spec.arm_rate(0) == pytest.approx(numeric, abs=1e-12)
    assert spec.arm_rate(0) == pytest.approx(1.166196, abs=1e-6)
    m2 = mh.SimModelSpec.from_name("m2")
    numeric, _ = quad(lambda v: math.exp(0.3 * v + (-0.5 + 0.5 * v)), 0.0, 1.0)
    assert m2.arm_rate(1) == pytest.approx(numeric, abs=1e-10)


def test_true_cv_closed_form():
    m2 = mh.SimModelSpec.from_name("m2")
    expected = 0.8 - 2.0 * (math.exp(-0.05) - math.exp(-0.45))
    assert m2.true_cv(0.9, 0.1) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.172795, abs=5e-6)
    numeric, _ = quad(lambda u: 1.0 - math.exp(-0.5 + 0.5 * u), 0.1, 0.9)
    assert m2.true_cv(0.9, 0.1) == pytest.approx(numeric, abs=1e-10)
    assert m2.true_ve(0.5) == pytest.approx(1.0 - math.exp(-0.25), abs=1e-12)


def test_censoring_rate_closed_form_and_bisection():
    spec = mh.SimModelSpec.from_name("m1")
    rate = mh.censoring_rate_for_target(spec, 0.25)
    assert rate == pytest.approx(spec.arm_rate(0) / 3.0, abs=1e-10)
    assert rate == pytest.approx(0.388732, abs=1e-6)
    m8 = mh.SimModelSpec.from_name("m8")
    c = mh.censoring_rate_for_target(m8, 0.25)
    achieved = 0.5 * (c / (c + m8.arm_rate(0)) + c / (c + m8.arm_rate(1)))
    assert achieved == pytest.approx(0.25, abs=1e-9)
    with pytest.raises(ValueError):
        mh.censoring_rate_for_target(spec, 0.0)
    with pytest.raises(ValueError):
        mh.censoring_rate_for_target(spec, 0.95)


def test_horizon_is_99th_percentile():
    spec = mh.SimModelSpec.from_name("m2")
    for z in (0, 1):
        assert spec.horizon(z) == pytest.approx(math.log(100.0) / spec.arm_rate(z))


def test_mark13_zero_tilt_gives_uniform_marks():
    spec = mh.SimModelSpec(kind="mark13", alpha=-0.5, beta=0.0, gamma=0.0)
    ds = mh.sample_mark13(spec, 50_000, 17)
    marks = ds.marks()
    marks = marks[~np.isnan(marks)]
    assert kstest(marks, "uniform").pvalue > 0.01
    # failure times exponential with rate exp(alpha z)
    z = ds.fixed_covariates()[:, 0]
    t0 = ds.times()[(z == 0) & (ds.status() == 1)]
    assert t0.mean() == pytest.approx(
        1.0, abs=4 * t0.std() / math.sqrt(t0.size) + 0.05
    )


def test_mark13_tilted_mark_mean():
    spec = mh.SimModelSpec.from_name("m1")  # tilt c = 0.3 in both arms
    ds = mh.sample_mark13(spec, 100_000, 23)
    c = 0.3
    expected = (math.exp(c) * (c - 1.0) + 1.0) / (c * (math.exp(c) - 1.0))
    numeric, _ = quad(
        lambda v: v * math.exp(c * v) / ((math.exp(c) - 1.0) / c), 0.0, 1.0
    )
    assert expected == pytest.approx(numeric, abs=1e-12)
    marks = ds.marks()
    marks = marks[~np.isnan(marks)]
    se = marks.std() / math.sqrt(marks.size)
    assert abs(marks.mean() - expected) < 3 * se


def test_mark13_log_density_slope():
    # binned log-density of the marks in arm z has slope gamma + beta z
    spec = mh.SimModelSpec.from_name("m2")
    ds = mh.sample_mark13(spec, 1_000_000, 31)
    marks, z = ds.marks(), ds.fixed_covariates()[:, 0]
    for arm, slope_true in ((0, 0.3), (1, 0.8)):
        v = marks[(z == arm) & ~np.isnan(marks)]
        counts, edges = np.histogram(v, bins=40, range=(0.0, 1.0))
        mid = 0.5 * (edges[:-1] + edges[1:])
        y = np.log(counts)
        w = counts.astype(float)
        xbar = np.average(mid, weights=w)
        slope = np.sum(w * (mid - xbar) * y) / np.sum(w * (mid - xbar) ** 2)
        se = 1.0 / math.sqrt(np.sum(w * (mid - xbar) ** 2))
        assert abs(slope - slope_true) < 3 * se + 1e-3


def test_censoring_calibration_realized():
    for name in ("m1", "m8"):
        spec = mh.SimModelSpec.from_name(name)
        ds = mh.sample_dataset(spec, 100_000, 77)
        realized = 1.0 - ds.n_events / ds.n
        assert abs(realized - 0.25) < 0.01


def test_crossing_arms_share_failure_law():
    ds = mh.sample_crossing(100_000, 5)
    z = ds.fixed_covariates()[:, 0]
    t = ds.times()
    # compare observed follow-up distributions across arms
    assert ks_2samp(t[z == 0], t[z == 1]).pvalue > 0.01
    marks = ds.marks()
    v1 = marks[(z == 1) & ~np.isnan(marks)]
    se = v1.std() / math.sqrt(v1.size)
    assert abs(v1.mean() - 2.0 / 3.0) < 3 * se
    spec = mh.SimModelSpec(kind="crossing")
    assert spec.true_ve(0.5) == 0.0  # efficacy crosses zero mid-interval
    assert spec.true_ve(0.25) == pytest.approx(0.5)


def test_crossing_marginal_efficacy_is_null():
    ds = mh.sample_crossing(20_000, 8)
    fit = mh.cox_fit(ds)
    se = math.sqrt(fit.covariance[0, 0])
    assert abs(fit.beta[0]) < 3 * se


def test_m1_arms_exchangeable():
    ds = mh.sample_mark13(mh.SimModelSpec.from_name("m1"), 100_000, 13)
    z = ds.fixed_covariates()[:, 0]
    assert ks_2samp(ds.times()[z == 0], ds.times()[z == 1]).pvalue > 0.01
    marks = ds.marks()
    ev = ~np.isnan(marks)
    assert ks_2samp(marks[ev & (z == 0)], marks[ev & (z == 1)]).pvalue > 0.01


def test_sampler_determinism():
    spec = mh.SimModelSpec.from_name("m3")
    d1 = mh.sample_mark13(spec, 200, 99)
    d2 = mh.sample_mark13(spec, 200, 99)
    np.testing.assert_array_equal(d1.times(), d2.times())
    np.testing.assert_array_equal(d1.marks(), d2.marks())


def _small_config(seed=5, reps=6, n_jobs=1):
    spec = mh.SimModelSpec.from_name("m1")
    cfg = mh.AnalysisConfig(bandwidth=0.15, grid=9, seed=seed, resamples=1000)
    return mh.MCConfig(
        model=spec, n=150, replications=reps, analysis=cfg,
        do_wald=True, pointwise_marks=(0.5,), n_jobs=n_jobs,
    )


def test_run_study_deterministic_across_workers():
    serial = mh.run_study(_small_config(n_jobs=1))
    parallel = mh.run_study(_small_config(n_jobs=2))
    assert serial.to_dict() == parallel.to_dict()


def test_run_study_reports_all_sections():
    report = mh.run_study(_small_config())
    assert set(report.rejection) == {
        "h10_T_a", "h10_T_m1", "h10_T_m2",
        "h20_T_a", "h20_T_m1", "h20_T_m2", "wald",
    }
    assert set(report.coverage) == {"simultaneous_grid", "simultaneous_interval"}
    assert set(report.pointwise_coverage) == {0.5}
    for key, value in report.rejection.items():
        assert 0.0 <= value <= 1.0
        assert report.mc_se[key] == pytest.approx(
            math.sqrt(value * (1 - value) / report.used)
        )


def test_run_study_aborts_on_mass_failure():
    # tiny samples with a narrow bandwidth leave most grid windows empty
    spec = mh.SimModelSpec.from_name("m1")
    cfg = mh.AnalysisConfig(bandwidth=0.05, grid=17, seed=3, resamples=1000)
    mcc = mh.MCConfig(model=spec, n=12, replications=8, analysis=cfg)
    with pytest.raises(SimulationError):
        mh.run_study(mcc)


def test_mc_report_serialization(tmp_path):
    report = mh.run_study(_small_config())
    json_path = tmp_path / "report.json"
    with open(json_path, "w") as handle:
        report.to_json(handle)
    import json

    payload = json.loads(json_path.read_text())
    assert payload["model"] == "m1"
    csv_path = tmp_path / "table.csv"
    with open(csv_path, "w") as handle:
        report.to_table_csv(handle)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("model,n,h,statistic")
    assert len(lines) == 1 + len(report.rejection)
