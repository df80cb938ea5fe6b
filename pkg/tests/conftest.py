import numpy as np
import pytest

from ver import _kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # JIT compilation happens once here so timed tests measure workload only
    _kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
