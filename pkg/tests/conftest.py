import numpy as np
import pytest

from ctkd.autodiff import Tensor, backward

FD_STEP = 1e-5
GRAD_SEEDS = range(20)


def numeric_grad(f, arrays, index, h=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*arrays)
        x[i] = old - h
        down = f(*arrays)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-5):
    """Norm-wise relative error. ``floor`` keeps gradients that are identically
    zero in exact arithmetic (a bias feeding a normalization) from turning
    finite-difference round-off into a relative error of 1."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / scale


def gradcheck(op, arrays, seed=0, wrt=None):
    """Largest relative error between reverse-mode and central-difference gradients.

    The op output is contracted with fixed random weights so every output
    element contributes to the scalar being differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    out_shape = np.shape(op(*[Tensor(a) for a in arrays]).data)
    w = np.random.default_rng(seed + 1000).normal(size=out_shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * w).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    from ctkd.autodiff import functional as F

    backward(F.sum(F.mul(out, Tensor(w))))
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(analytic, numeric_grad(scalar, arrays, i)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
