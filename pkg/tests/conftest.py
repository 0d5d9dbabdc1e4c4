import numpy as np
import pytest

from marginreg.phantom import PhantomSpec, build_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def identity_phantom():
    return build_phantom(PhantomSpec(true_scale=1.0, peak_warp_m=0.0, cloud_noise_sigma_m=0.0, capture_motion=False, rng_seed=1))


@pytest.fixture(scope="session")
def shrink_phantom():
    return build_phantom(PhantomSpec(peak_warp_m=0.0, cloud_noise_sigma_m=0.0, capture_motion=False, rng_seed=1))


@pytest.fixture(scope="session")
def wedge_phantom():
    return build_phantom(PhantomSpec(rng_seed=1))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
