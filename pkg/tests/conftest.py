import os
import sys

import numpy as np
import pytest

# Add project root to sys.path if needed
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from analysis.simulate import ConstantGamma, DesignSpec, GoupParams, calibrated, simulate_panel  # noqa: E402
from data.data_models import Panel, Subject  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte Carlo and desk-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo or desk-scale check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_subject(subject_id, times, counts, offsets=None, z=(0.0,), x=None, block_ids=None):
    times = np.asarray(times, dtype=float)
    k = times.shape[0]
    return Subject(
        subject_id=subject_id,
        subject_covariates=np.asarray(z, dtype=float),
        trip_index=np.arange(1, k + 1),
        times=times,
        offsets=np.ones(k) if offsets is None else offsets,
        counts=counts,
        trip_covariates=times.reshape(k, 1) if x is None else x,
        block_ids=block_ids,
    )


@pytest.fixture(scope="function")
def small_panel():
    """
    Three hand-made subjects with one subject covariate and X = trip time.
    """
    return Panel(
        subjects=[
            make_subject("a", [0.1, 0.3, 0.5, 0.9], [1, 0, 3, 2], offsets=[1.0, 2.0, 1.5, 0.5], z=(0.0,)),
            make_subject("b", [0.0, 0.2, 0.2, 0.7, 1.0], [0, 2, 1, 4, 1], z=(1.0,)),
            make_subject("c", [0.05, 0.6, 0.8], [2, 1, 5], offsets=[0.7, 1.2, 3.0], z=(1.0,)),
        ],
        z_names=("z1",),
        x_names=("x1",),
    )


def simulate(n=8, k=200, mean=2.0, gamma=300.0, sigma2=(1.0, 1.0, 1.0), seed=11, beta=0.0, alpha=0.0):
    design = DesignSpec(n_subjects=n, trips_per_subject=k, target_mean_count=mean)
    params = calibrated(
        GoupParams(alpha=(alpha,), beta=(beta,), sigma2_b=sigma2[0], sigma2_c=sigma2[1], sigma2_e=sigma2[2],
                   gamma=ConstantGamma(gamma=gamma)),
        design,
    )
    return simulate_panel(params, design, np.random.default_rng(seed))


@pytest.fixture(scope="function")
def goup_panel():
    """A small simulated GOUP panel: 8 subjects x 200 trips, mean count 2."""
    return simulate()


@pytest.fixture(scope="function")
def csv_path(tmp_path):
    return str(tmp_path / "panel.csv")


@pytest.fixture(scope="session")
def subject_factory():
    return make_subject


@pytest.fixture(scope="session")
def simulate_goup():
    return simulate
