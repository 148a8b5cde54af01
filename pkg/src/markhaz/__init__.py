"""Proportional hazards regression with a continuous mark.

Estimation of mark-varying regression coefficients by kernel-local partial
likelihood, pointwise and simultaneous confidence bands for mark-specific and
cumulative efficacy, hypothesis tests against zero and constant efficacy, and
a reproducible Monte Carlo harness.
"""

from .data import (
    AnalysisConfig,
    CovariatePath,
    DataError,
    Dataset,
    SurvivalRecord,
    ValidationReport,
    load_dataset,
    rescale_marks,
    save_dataset,
    validate,
)
from .kernels import Kernel, get_kernel
from .estimator import (
    BaselineSurface,
    CoxFit,
    DivergenceError,
    EmptyWindowError,
    EstimationError,
    FitOptions,
    LocalFit,
    NonconvergenceError,
    ProfileFit,
    RiskSetSums,
    SingularHessianError,
    baseline_cumulative,
    baseline_surface,
    beta_at_mark,
    cox_fit,
    fit_at,
    fit_profile,
    local_hessian,
    local_loglik,
    local_score,
    risk_set_sums,
)
from .inference import (
    Band,
    CumulativeCurves,
    InferenceError,
    TestReport,
    VarianceBundle,
    bridge_sup_quantile,
    cumulative_curves,
    cv_pointwise_band,
    cv_simultaneous_band_bridge,
    default_test_grid,
    multiplier_band,
    multiplier_influence_matrix,
    sigma_A_cumulative,
    test_h10,
    test_h20,
    variance_bundle,
    ve_pointwise_band,
)
from .simulate import (
    MCConfig,
    MCReport,
    SimModelSpec,
    SimulationError,
    censoring_rate_for_target,
    run_study,
    sample_crossing,
    sample_dataset,
    sample_mark13,
)
from .diagnostics import (
    ResidualCheckReport,
    ResidualSurface,
    WaldTest,
    martingale_residuals,
    residual_sum_check,
    residual_surface,
    wald_marginal,
    wald_pvalues,
)

__version__ = "0.1.0"
