"""Shared test helpers: random stream construction and numeric gradients."""

import numpy as np
import pytest

from evtforce.autodiff import Tensor
from evtforce.events import EventStream


def make_stream(rng, n=200, width=64, height=48, t_max=1_000_000):
    """Random valid stream: sorted timestamps, in-range coords, +-1 polarity."""
    t = np.sort(rng.integers(0, t_max, size=n))
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.choice([-1, 1], size=n)
    return EventStream(width, height, t_us=t, x=x, y=y, p=p)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def numeric_grad(loss_fn, tensor, h=1e-5):
    """Central finite differences of a scalar-returning closure wrt tensor.data.

    Mutates tensor.data in place (restoring each entry), so the tensor must
    hold float64 for the quotient to have usable precision.
    """
    assert tensor.data.dtype == np.float64
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn()
        flat[i] = orig - h
        f_minus = loss_fn()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def tensor64(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float64),
                  requires_grad=requires_grad)


def check_op_grads(build, inputs, rng, tol=1e-5, h=1e-5):
    """Gradcheck one op: autodiff grads vs central differences, all inputs.

    ``build(*inputs)`` must rerun the op's forward from the inputs' current
    data.  The output is reduced to a scalar through a fixed random
    projection (mul + reshape + mean), so the check also exercises graph
    composition.  Returns the worst relative error seen.
    """
    from evtforce import autodiff as ad

    probe = build(*inputs)
    w = Tensor(rng.normal(size=probe.data.shape).astype(np.float64))

    def loss_tensor():
        out = build(*inputs)
        flat = ad.reshape(ad.mul(out, w), (out.data.size,))
        return ad.mean_over_axis(flat, 0)

    ad.zero_grad(inputs)
    ad.backward(loss_tensor())
    worst = 0.0
    for inp in inputs:
        expected = numeric_grad(lambda: float(loss_tensor().data), inp, h=h)
        err = rel_err(inp.grad, expected)
        assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol:.0e}"
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
