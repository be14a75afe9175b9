import numpy as np
import pytest

from absolutenet import autodiff as ad
from absolutenet.data import HrfConfig, synth_epochs
from absolutenet.model import ModelConfig


@pytest.fixture
def rng():
    return ad.make_rng(1234)


@pytest.fixture(scope="session")
def easy_small():
    """40 trials per class of clearly separable data."""
    return synth_epochs(40, hrf=HrfConfig.easy(), seed=11)


@pytest.fixture
def tiny_config():
    """Small network that still exercises every block."""
    return ModelConfig(input_channels=4, input_samples=30, spatial_kernel=4, temporal_kernel=3,
                       st_spatial_filters=3, st_temporal_filters=4, ts_temporal_filters=3,
                       ts_spatial_filters=4, separable_kernel=3, separable_filters=3,
                       pool_size=5, pool_stride=4)


@pytest.fixture
def tiny_data(tiny_config):
    r = ad.make_rng(5)
    n = 24
    y = np.tile([0, 1], n // 2)
    X = r.standard_normal((n, tiny_config.input_channels, tiny_config.input_samples)).astype(np.float32)
    X[y == 1, :, 10:20] += 2.0
    return X, y


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE_LINES[self.number] = f"[{status}] {self.number}. {self.title}: {detail}"
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for criterion ``n``."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
