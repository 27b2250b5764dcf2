import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from avdepth.tensor import Tensor  # noqa: E402

FD_STEP = 1e-4
GRAD_RTOL = 1e-4


def numeric_grad(f, arr, h=FD_STEP):
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


def gradcheck(fn, inputs, rng, tol=GRAD_RTOL):
    """Compare autograd against finite differences for ``sum(fn(*inputs) * R)``.

    Returns the worst relative error across all inputs.
    """
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    loss = (out * Tensor(weights)).sum() if out.ndim else out
    loss.backward()
    worst = 0.0
    for t in tensors:
        def f():
            o = fn(*[Tensor(x.data) for x in tensors])
            return float(np.sum(o.data * weights)) if o.ndim else float(o.data)
        num = numeric_grad(f, t.data)
        worst = max(worst, rel_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
