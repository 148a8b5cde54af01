import numpy as np
import pytest

import markhaz as mh

# Two-subject sample: one event (X=1, V=0.5, Z=1), one censored (X=2, Z=0).
# Hand enumeration gives every risk-set quantity in closed form.


@pytest.fixture(scope="session")
def d0():
    return mh.Dataset.from_arrays(
        [1.0, 2.0], [1, 0], [0.5, np.nan], [[1.0], [0.0]]
    )


# Three-subject sample whose local and ordinary Cox fits share the exact root
# exp(beta) = sqrt(2): both event marks coincide so kernel weights cancel.


@pytest.fixture(scope="session")
def d1():
    return mh.Dataset.from_arrays(
        [0.5, 1.0, 2.0], [1, 1, 0], [0.5, 0.5, np.nan], [[0.0], [1.0], [0.0]]
    )


@pytest.fixture(scope="session")
def forced_zero_profile():
    """Profile object pinned at beta == 0 on a small grid (for hand values)."""

    def build(p=1, grid=(0.3, 0.5, 0.7), interval=(0.1, 0.9), n=3, h=0.2):
        config = mh.AnalysisConfig(bandwidth=h, interval=interval, grid=np.asarray(grid))
        fits = tuple(
            mh.LocalFit(
                v=float(v),
                beta_hat=np.zeros(p),
                information=np.eye(p),
                squared_kernel_information=np.eye(p),
                converged=True,
                iterations=0,
                score_norm=0.0,
            )
            for v in grid
        )
        return mh.ProfileFit(grid=np.asarray(grid, float), fits=fits,
                             config=config, n=n, p=p)

    return build


@pytest.fixture(scope="session")
def m1_sample():
    return mh.sample_mark13(mh.SimModelSpec.from_name("m1"), 500, 20250809)


@pytest.fixture(scope="session")
def m1_fitted(m1_sample):
    config = mh.AnalysisConfig(bandwidth=0.1, seed=20250809)
    profile = mh.fit_profile(m1_sample, config)
    bundle = mh.variance_bundle(profile)
    curves = mh.cumulative_curves(profile, bundle, m1_sample)
    return m1_sample, profile, bundle, curves
