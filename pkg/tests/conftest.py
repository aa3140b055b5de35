import numpy as np
import pytest

from pidnet import tensor


@pytest.fixture(autouse=True)
def _reset_session_dtype():
    yield
    tensor.set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
