import numpy as np
import pytest

from fireshift.core.model import Fragment, ModelSpec
from fireshift.core.numkernel import Rng


@pytest.fixture
def rng():
    return Rng(1234, "tests")


@pytest.fixture
def linear_spec():
    return ModelSpec(input_dim=2, num_classes=2)


@pytest.fixture
def mlp_spec():
    # d = (3+1)*4 + (4+1)*3 = 31
    return ModelSpec(input_dim=3, hidden_sizes=(4,), num_classes=3)


@pytest.fixture
def make_fragment():
    """Gaussian features with uniform random labels."""

    def _make(rng: Rng, n: int, input_dim: int, num_classes: int, id: str = "frag", scale: float = 1.0):
        x = rng.normal(0.0, scale, size=(n, input_dim))
        y = rng.integers(0, num_classes, size=n)
        return Fragment(id, x, y)

    return _make


@pytest.fixture
def separable():
    """Two well-separated 2-D clusters, labels 0 and 1."""
    gen = Rng(7, "separable")
    x0 = gen.normal(0.0, 0.3, size=(40, 2)) + np.array([-2.0, 0.0])
    x1 = gen.normal(0.0, 0.3, size=(40, 2)) + np.array([2.0, 0.0])
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(40, dtype=int), np.ones(40, dtype=int)])
    order = gen.permutation(80)
    return Fragment("separable", x[order], y[order])
