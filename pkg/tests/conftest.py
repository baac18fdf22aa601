import numpy as np
import pytest

from fmcnet import ops
from fmcnet.autodiff import Tensor
from fmcnet.rng import SplitMix64


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mix():
    return SplitMix64(12345)


def quad(t: Tensor) -> Tensor:
    """Scalar probe: sum of squares, makes gradients input-dependent."""
    return ops.reduce_sum(ops.mul(t, t))
