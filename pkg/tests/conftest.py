import numpy as np
import pytest

from deepgp.training import ParameterLayout, greedy_init


def central_diff(f, x, h=1e-6):
    """Plain central differences of scalar ``f`` over every entry of ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def random_model(seed=0, N=12, dims=(3, 2), K=4, D=5, jiggle=0.3):
    """Greedy-initialised model pushed to a generic (non-symmetric) parameter point."""
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(N, D))
    Y -= Y.mean(0)
    model = greedy_init(Y, list(dims), K, seed=seed)
    layout = ParameterLayout.from_model(model)
    x = layout.pack(model) + jiggle * rng.normal(size=layout.size)
    return layout.unpack(x, model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
