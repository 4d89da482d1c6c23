"""Differentiable primitive operations.

Every op validates shapes strictly (no implicit broadcasting apart from
``scale`` by a Python scalar and the explicit ``bias_add``/``linear``),
checks its result for overflow, and records itself on the active tape when
any input is grad-enabled.  Backward rules live in ``BACKWARD_RULES`` keyed
by op name so they are looked up at traversal time.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from nfuse.tensor import BACKWARD_RULES, NumericalError, ShapeError, Tensor, active_tape

__all__ = [
    "add", "sub", "mul", "scale", "exp", "relu", "gelu",
    "sum", "mean", "max", "reshape", "transpose_last_two", "concat", "split",
    "slice_axis", "stack", "matmul", "softmax", "layer_norm", "linear", "bias_add",
    "cross_entropy",
]


def _result(op: str, out: np.ndarray, inputs: Sequence[Tensor], saved: tuple = ()) -> Tensor:
    if not np.isfinite(out).all() and all(np.isfinite(x.data).all() for x in inputs):
        raise NumericalError(op)
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(x.grad_enabled for x in inputs):
        t.grad_enabled = True
        t.node_id = tape.record(op, inputs, saved, out.shape)
        t.tape = tape
    return t


def _rule(name):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn
    return register


def _axis(op: str, axis: int, ndim: int, shape) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, shape, detail=f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bw(saved, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bw(saved, g):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), (a.data, b.data))


@_rule("mul")
def _mul_bw(saved, g):
    a, b = saved
    return g * b, g * a


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result("scale", a.data * a.dtype.type(s), (a,), (s,))


@_rule("scale")
def _scale_bw(saved, g):
    (s,) = saved
    return (g * g.dtype.type(s),)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), (out,))


@_rule("exp")
def _exp_bw(saved, g):
    (out,) = saved
    return (g * out,)


def relu(a: Tensor) -> Tensor:
    return _result("relu", np.maximum(a.data, 0), (a,), (a.data,))


@_rule("relu")
def _relu_bw(saved, g):
    (x,) = saved
    return (g * (x > 0),)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    out = 0.5 * x * (1.0 + erf(x * x.dtype.type(_SQRT_HALF)))
    return _result("gelu", out.astype(x.dtype, copy=False), (a,), (x,))


@_rule("gelu")
def _gelu_bw(saved, g):
    (x,) = saved
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_SQRT_HALF)))
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)


# -- reductions ------------------------------------------------------------

def _expand(g, in_shape, axis, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def sum(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _axis("sum", axis, a.ndim, a.shape)
    return _result("sum", np.sum(a.data, axis=ax, keepdims=keepdims), (a,), (a.shape, ax, keepdims))


@_rule("sum")
def _sum_bw(saved, g):
    in_shape, ax, keepdims = saved
    return (_expand(g, in_shape, ax, keepdims),)


def mean(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = _axis("mean", axis, a.ndim, a.shape)
    return _result("mean", np.mean(a.data, axis=ax, keepdims=keepdims), (a,), (a.shape, ax, keepdims))


@_rule("mean")
def _mean_bw(saved, g):
    in_shape, ax, keepdims = saved
    return (_expand(g, in_shape, ax, keepdims) / g.dtype.type(in_shape[ax]),)


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum over ``axis``; gradient goes to the first (lowest-index) argmax."""
    ax = _axis("max", axis, a.ndim, a.shape)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)
    return _result("max", out, (a,), (a.shape, ax, keepdims, idx))


@_rule("max")
def _max_bw(saved, g):
    in_shape, ax, keepdims, idx = saved
    if not keepdims:
        g = np.expand_dims(g, ax)
    z = np.zeros(in_shape, dtype=g.dtype)
    np.put_along_axis(z, np.expand_dims(idx, ax), g, axis=ax)
    return (z,)


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if any(n <= 0 for n in shape) or math.prod(shape) != a.size:
        raise ShapeError("reshape", a.shape, shape, detail="element count must match")
    return _result("reshape", a.data.reshape(shape), (a,), (a.shape,))


@_rule("reshape")
def _reshape_bw(saved, g):
    (in_shape,) = saved
    return (g.reshape(in_shape),)


def transpose_last_two(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose_last_two", a.shape, detail="rank must be >= 2")
    return _result("transpose_last_two", np.swapaxes(a.data, -1, -2), (a,))


@_rule("transpose_last_two")
def _transpose_bw(saved, g):
    return (np.swapaxes(g, -1, -2),)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="nothing to concatenate")
    first = tensors[0]
    ax = _axis("concat", axis, first.ndim, first.shape)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(first.shape, t.shape))
        ):
            raise ShapeError("concat", first.shape, t.shape, detail=f"must agree off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = tuple(t.shape[ax] for t in tensors)
    return _result("concat", out, tensors, (ax, sizes))


@_rule("concat")
def _concat_bw(saved, g):
    ax, sizes = saved
    return np.split(g, np.cumsum(sizes)[:-1], axis=ax)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _axis("slice", axis, a.ndim, a.shape)
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError("slice", a.shape, detail=f"bad range [{start}, {stop}) on axis {ax}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    return _result("slice", a.data[tuple(index)], (a,), (a.shape, tuple(index)))


@_rule("slice")
def _slice_bw(saved, g):
    in_shape, index = saved
    z = np.zeros(in_shape, dtype=g.dtype)
    z[index] = g
    return (z,)


def split(a: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    ax = _axis("split", axis, a.ndim, a.shape)
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes) or np.sum(sizes) != a.shape[ax]:
        raise ShapeError("split", a.shape, detail=f"sizes {sizes} do not cover axis {ax}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, ax, start, start + s))
        start += s
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join equal-shaped tensors along a new axis (reshape + concat)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack", detail="nothing to stack")
    shape = tensors[0].shape
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    ax = _axis("stack", axis, len(shape) + 1, shape)
    new_shape = shape[:ax] + (1,) + shape[ax:]
    return concat([reshape(t, new_shape) for t in tensors], axis=ax)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims must be equal."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result("matmul", np.matmul(a.data, b.data), (a, b), (a.data, b.data))


@_rule("matmul")
def _matmul_bw(saved, g):
    a, b = saved
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out), ``b`` is (out,)."""
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    return _result("linear", np.matmul(x.data, w.data) + b.data, (x, w, b), (x.data, w.data))


@_rule("linear")
def _linear_bw(saved, g):
    x, w = saved
    n_in, n_out = w.shape
    g2 = g.reshape(-1, n_out)
    return np.matmul(g, w.T), np.matmul(x.reshape(-1, n_in).T, g2), g2.sum(axis=0)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis (the one explicit broadcast)."""
    if b.shape != (x.shape[-1],):
        raise ShapeError("bias_add", x.shape, b.shape)
    return _result("bias_add", x.data + b.data, (x, b), (x.shape[-1],))


@_rule("bias_add")
def _bias_add_bw(saved, g):
    (c,) = saved
    return g, g.reshape(-1, c).sum(axis=0)


# -- normalisations --------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    ax = _axis("softmax", axis, a.ndim, a.shape)
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=ax, keepdims=True)
    return _result("softmax", out, (a,), (out, ax))


@_rule("softmax")
def _softmax_bw(saved, g):
    out, ax = saved
    return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data
    return _result("layer_norm", out, (x, gamma, beta), (xhat, inv_std, gamma.data))


@_rule("layer_norm")
def _layer_norm_bw(saved, g):
    xhat, inv_std, gamma = saved
    c = xhat.shape[-1]
    dxhat = g * gamma
    dx = inv_std * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    dgamma = (g * xhat).reshape(-1, c).sum(axis=0)
    dbeta = g.reshape(-1, c).sum(axis=0)
    return dx, dgamma, dbeta


# -- losses ----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, classes) logits against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    log_p = z - log_z
    n = logits.shape[0]
    loss = -np.mean(log_p[np.arange(n), labels])
    return _result("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), (np.exp(log_p), labels))


@_rule("cross_entropy")
def _cross_entropy_bw(saved, g):
    probs, labels = saved
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    return (d * (g / n),)
