import numpy as np
import pytest

from levyhjb.config import default_config
from levyhjb.spectral import build_basis, build_trilinear_tensor


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def tensors():
    return {m: build_trilinear_tensor(build_basis(m)) for m in (2, 4, 8, 16)}


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
