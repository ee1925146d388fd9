"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float32 or float64 ndarray.  Every op records its
parents and a backward rule on the result, so a forward pass implicitly
builds the computation graph; ``backward(loss)`` walks that graph once in
reverse topological order and accumulates dLoss/dLeaf into the ``grad``
of every leaf created with ``requires_grad=True``.  Gradients add across
calls until ``zero_grad`` resets them, and a leaf that the loss never
touches keeps its zero gradient.

Shape discipline is strict: elementwise ops demand identical shapes and
the only broadcasts are a trailing-shape bias add and the documented
matmul batching.  Recording can be suspended with ``no_grad()``; forward
values are identical either way.  Graphs are cheap single-thread objects;
build and differentiate a graph on one thread at a time.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

# Python floats, not numpy scalars, so float32 operands are not upcast.
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated in c)."""
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every row of ``x``; b's shape must equal x's trailing shape.

    This is the one sanctioned broadcast: the bias gradient sums over the
    leading axes.
    """
    if b.data.ndim == 0 or b.data.ndim > x.data.ndim:
        raise ValueError("add_bias: bias rank must be >= 1 and <= operand rank")
    if x.data.shape[x.data.ndim - b.data.ndim:] != b.data.shape:
        raise ValueError(
            f"add_bias: bias shape {b.data.shape} does not match trailing "
            f"dims of {x.data.shape}"
        )
    lead = tuple(range(x.data.ndim - b.data.ndim))

    def backward(g):
        return g, g.sum(axis=lead) if lead else g

    return _result(x.data + b.data, (x, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Allowed shapes: 2-D @ 2-D; stacked @ 2-D (a batch of matrices against
    one shared matrix, as in a linear layer); and batched @ batched with
    exactly matching leading dims (as in per-head attention).  Anything
    else is a shape error; there is no implicit broadcasting.
    """
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ValueError("matmul: operands must have rank >= 2")
    if A.shape[-1] != B.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {A.shape} @ {B.shape}")
    shared = B.ndim == 2
    if not shared and (A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2]):
        raise ValueError(
            f"matmul: batch dims must match exactly (or B be 2-D), "
            f"{A.shape} @ {B.shape}"
        )

    def backward(g):
        if shared:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ B.swapaxes(-1, -2)
            gb = A.swapaxes(-1, -2) @ g
        return ga, gb

    return _result(A @ B, (a, b), backward)


def transpose(a: Tensor, axis0: int = -2, axis1: int = -1) -> Tensor:
    def backward(g):
        return (g.swapaxes(axis0, axis1),)

    return _result(a.data.swapaxes(axis0, axis1), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ValueError("layer_norm: gamma and beta must have shape (last_dim,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g
        dxhat = g * gamma.data
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - mean_d - xhat * mean_dx)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x) with the erf form."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    n = x.data.shape[axis]
    shape = x.data.shape

    def backward(g):
        expanded = np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, shape) / n,)

    return _result(x.data.mean(axis=axis), (x,), backward)


def concat_tokens(a: Tensor, b: Tensor, axis: int = -2) -> Tensor:
    """Concatenate two tensors along the token axis (second to last)."""
    if a.data.ndim != b.data.ndim:
        raise ValueError("concat_tokens: rank mismatch")
    split = a.data.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _result(np.concatenate([a.data, b.data], axis=axis), (a, b), backward)


def take_token(x: Tensor, index: int, axis: int = -2) -> Tensor:
    """Select one entry along the token axis, dropping that axis."""
    out = np.take(x.data, index, axis=axis)
    shape = x.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        gx[tuple(idx)] = g
        return (gx,)

    return _result(out, (x,), backward)


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """Tile a size-1 leading axis n times; the gradient sums back over it."""
    if x.data.shape[0] != 1:
        raise ValueError("repeat_batch: leading axis must have size 1")

    def backward(g):
        return (g.sum(axis=0, keepdims=True),)

    return _result(np.repeat(x.data, n, axis=0), (x,), backward)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every reachable requires_grad leaf.

    The loss must be a scalar (size-1) tensor recorded on a graph.
    Calling backward again without ``zero_grad`` adds another full
    gradient on top of the stored one.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise RuntimeError("loss is not attached to a recorded graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grad(params) -> None:
    """Reset stored gradients; accepts an iterable or a name -> Tensor dict."""
    tensors = params.values() if isinstance(params, dict) else params
    for p in tensors:
        p.grad = np.zeros_like(p.data)


def params_to_bytes(params: dict[str, Tensor]) -> tuple[bytes, dict]:
    """Flatten named parameters to one little-endian float32 blob.

    Returns the blob and an index {name: {shape, offset}} with byte
    offsets, so the pair is self-describing and byte-reproducible.
    """
    blob = bytearray()
    index: dict[str, dict] = {}
    for name, p in params.items():
        index[name] = {"shape": list(p.data.shape), "offset": len(blob)}
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    return bytes(blob), index


def params_from_bytes(
    blob: bytes, index: dict, dtype=np.float32, requires_grad: bool = True
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, entry in index.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        params[name] = Tensor(
            flat.reshape(shape).astype(dtype), requires_grad=requires_grad
        )
    return params
