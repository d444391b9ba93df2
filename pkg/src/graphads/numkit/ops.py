"""Differentiable operations on :class:`Tensor`.

Conventions:

* float64 everywhere; no implicit broadcasting.  Shape mixing happens only
  through the explicit ``*_bcast`` / ``*_prefix`` ops whose backward rules
  sum over the broadcast axes.
* Ops never mutate their inputs.
* Index/segment arguments are plain integer numpy arrays, not tensors.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DomainError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _shapes(*tensors: Tensor) -> str:
    return " vs ".join(str(t.shape) for t in tensors)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes must match exactly, got {_shapes(a, b)}")


# ---------------------------------------------------------------------------
# elementwise, same shape
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    ad, bd = a.data, b.data
    return make_result(ad / bd, "div", (a, b),
                       lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_result(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data + float(c), "add_scalar", (a,), lambda g: (g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: inputs must be strictly positive")
    ad = a.data
    return make_result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    if p != int(p) and np.any(ad < 0.0):
        raise DomainError("pow_scalar: negative base with fractional exponent")
    if p < 0 and np.any(ad == 0.0):
        raise DomainError("pow_scalar: zero base with negative exponent")
    out = ad ** p
    return make_result(out, "pow_scalar", (a,),
                       lambda g: (g * p * ad ** (p - 1.0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    slope = float(slope)
    ad = a.data
    out = np.where(ad >= 0.0, ad, slope * ad)
    return make_result(out, "leaky_relu", (a,),
                       lambda g: (g * np.where(ad >= 0.0, 1.0, slope),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.where(ad >= 0.0, ad, np.expm1(ad))
    return make_result(out, "elu", (a,),
                       lambda g: (g * np.where(ad >= 0.0, 1.0, out + 1.0),))


# ---------------------------------------------------------------------------
# explicit broadcasts
# ---------------------------------------------------------------------------

def _check_suffix(op: str, x: Tensor, y: Tensor) -> None:
    if y.data.ndim == 0 or y.data.ndim > x.data.ndim \
            or x.shape[x.data.ndim - y.data.ndim:] != y.shape:
        raise ShapeError(f"{op}: {y.shape} is not a trailing suffix of {x.shape}")


def add_bcast(x, y) -> Tensor:
    """x + y where y's shape is a trailing suffix of x's shape."""
    x, y = as_tensor(x), as_tensor(y)
    _check_suffix("add_bcast", x, y)
    lead = tuple(range(x.data.ndim - y.data.ndim))
    return make_result(x.data + y.data, "add_bcast", (x, y),
                       lambda g: (g, g.sum(axis=lead) if lead else g))


def mul_bcast(x, y) -> Tensor:
    """x * y where y's shape is a trailing suffix of x's shape."""
    x, y = as_tensor(x), as_tensor(y)
    _check_suffix("mul_bcast", x, y)
    lead = tuple(range(x.data.ndim - y.data.ndim))
    xd, yd = x.data, y.data
    return make_result(xd * yd, "mul_bcast", (x, y),
                       lambda g: (g * yd, (g * xd).sum(axis=lead) if lead else g * xd))


def mul_prefix(x, v) -> Tensor:
    """Scale trailing slices: out[i, ...] = x[i, ...] * v[i] for prefix-shaped v."""
    x, v = as_tensor(x), as_tensor(v)
    if v.data.ndim == 0 or v.data.ndim >= x.data.ndim or x.shape[:v.data.ndim] != v.shape:
        raise ShapeError(f"mul_prefix: {v.shape} is not a leading prefix of {x.shape}")
    trail = tuple(range(v.data.ndim, x.data.ndim))
    v_exp = v.data.reshape(v.shape + (1,) * len(trail))
    xd = x.data
    return make_result(xd * v_exp, "mul_prefix", (x, v),
                       lambda g: (g * v_exp, (g * xd).sum(axis=trail)))


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,),
                       lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return make_result(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def swap_last2(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"swap_last2: need ndim >= 2, got {x.shape}")
    return make_result(np.swapaxes(x.data, -1, -2).copy(), "swap_last2", (x,),
                       lambda g: (np.swapaxes(g, -1, -2),))


def swap_axes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    nd = x.data.ndim
    if not (-nd <= a < nd and -nd <= b < nd):
        raise ShapeError(f"swap_axes: axes ({a}, {b}) out of range for {x.shape}")
    return make_result(np.swapaxes(x.data, a, b).copy(), "swap_axes", (x,),
                       lambda g: (np.swapaxes(g, a, b),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != ref:
            raise ShapeError(f"concat: rank mismatch, {_shapes(*tensors)}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, "concat", tensors, back)


def take_rows(x, idx) -> Tensor:
    """Gather along axis 0; repeated indices scatter-add in backward."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: index must be 1-D, got {idx.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take_rows: index out of range for {x.shape}")
    xshape = x.shape

    def back(g):
        return (_scatter_rows(xshape, idx, g),)

    return make_result(x.data[idx], "take_rows", (x,), back)


def _scatter_rows(shape: tuple[int, ...], idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = shape[0]
    cols = int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
    if cols == 1 and len(shape) == 1:
        return np.bincount(idx, weights=g, minlength=n)
    flat = (idx[:, None] * cols + np.arange(cols)[None, :]).ravel()
    out = np.bincount(flat, weights=g.reshape(idx.size * cols), minlength=n * cols)
    return out.reshape(shape)


def index_axis1(x, i: int) -> Tensor:
    """out = x[:, i, ...] with zero-padded scatter backward."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"index_axis1: need ndim >= 2, got {x.shape}")
    i = int(i)
    if not 0 <= i < x.shape[1]:
        raise ShapeError(f"index_axis1: index {i} out of range for {x.shape}")
    xshape = x.shape

    def back(g):
        out = np.zeros(xshape)
        out[:, i] = g
        return (out,)

    return make_result(x.data[:, i].copy(), "index_axis1", (x,), back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), "sum_all", (x,),
                       lambda g: (np.full(shape, float(g)),))


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("sum_axis", x, axis)
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_result(x.data.sum(axis=axis), "sum_axis", (x,), back)


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("mean_axis", x, axis)
    n = x.shape[axis]
    if n == 0:
        raise DomainError("mean_axis: empty axis")
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy() / n,)

    return make_result(x.data.mean(axis=axis), "mean_axis", (x,), back)


def l2_norm(x) -> Tensor:
    """Euclidean norm of all entries; gradient is x / norm (zeros at 0)."""
    x = as_tensor(x)
    norm = float(np.sqrt(np.sum(x.data * x.data)))
    xd = x.data

    def back(g):
        if norm == 0.0:
            return (np.zeros_like(xd),)
        return (float(g) * xd / norm,)

    return make_result(np.asarray(norm), "l2_norm", (x,), back)


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {x.shape}")
    return axis % nd


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {_shapes(a, b)}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, "matmul", (a, b),
                       lambda g: (g @ bd.T, ad.T @ g))


def bmm(a, b) -> Tensor:
    """Batched matmul over a leading stack axis: (B,m,k) @ (B,k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {_shapes(a, b)}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, "bmm", (a, b),
                       lambda g: (g @ np.swapaxes(bd, -1, -2),
                                  np.swapaxes(ad, -1, -2) @ g))


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; slices sum to 1."""
    x = as_tensor(x)
    axis = _check_axis("softmax", x, axis)
    if x.shape[axis] == 0:
        raise DomainError("softmax: empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, "softmax", (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got {_shapes(gain, bias)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else (g * xhat)
        dbias = g.sum(axis=lead) if lead else g
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return (dx, dgain, dbias)

    return make_result(out, "layer_norm", (x, gain, bias), back)


def logsumexp_rows(x) -> Tensor:
    """Row-wise log-sum-exp of a matrix, computed with max shifting."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected a matrix, got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    soft = e / s

    def back(g):
        return (soft * g[:, None],)

    return make_result(out, "logsumexp_rows", (x,), back)


def take_diag(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"take_diag: expected a square matrix, got {x.shape}")
    n = x.shape[0]

    def back(g):
        out = np.zeros((n, n))
        np.fill_diagonal(out, g)
        return (out,)

    return make_result(np.diagonal(x.data).copy(), "take_diag", (x,), back)


# ---------------------------------------------------------------------------
# segment ops (grouped reductions over edge arrays)
# ---------------------------------------------------------------------------

def segment_softmax(x, seg, num_segments: int) -> Tensor:
    """Softmax of 1-D ``x`` within groups given by ``seg`` (same length).

    Entries of each segment sum to 1; empty segments contribute nothing.
    """
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    if x.data.ndim != 1 or seg.shape != x.shape:
        raise ShapeError(f"segment_softmax: x {x.shape} and seg {seg.shape} must be equal 1-D")
    if x.size == 0:
        raise DomainError("segment_softmax: empty input")
    maxes = np.full(num_segments, -np.inf)
    np.maximum.at(maxes, seg, x.data)
    e = np.exp(x.data - maxes[seg])
    denom = np.bincount(seg, weights=e, minlength=num_segments)
    safe = np.where(denom == 0.0, 1.0, denom)
    out = e / safe[seg]

    def back(g):
        dots = np.bincount(seg, weights=g * out, minlength=num_segments)
        return (out * (g - dots[seg]),)

    return make_result(out, "segment_softmax", (x,), back)


def segment_weighted_rowsum(rows, coeff, seg, num_segments: int) -> Tensor:
    """out[s] = sum over e with seg[e]==s of coeff[e] * rows[e].

    ``rows`` is (E, d); ``coeff`` and ``seg`` are length E.
    """
    rows, coeff = as_tensor(rows), as_tensor(coeff)
    seg = np.asarray(seg, dtype=np.int64)
    if rows.data.ndim != 2:
        raise ShapeError(f"segment_weighted_rowsum: rows must be 2-D, got {rows.shape}")
    e_cnt, d = rows.shape
    if coeff.shape != (e_cnt,) or seg.shape != (e_cnt,):
        raise ShapeError("segment_weighted_rowsum: coeff/seg must match rows length")
    weighted = rows.data * coeff.data[:, None]
    flat = (seg[:, None] * d + np.arange(d)[None, :]).ravel()
    out = np.bincount(flat, weights=weighted.ravel(),
                      minlength=num_segments * d).reshape(num_segments, d)
    rd, cd = rows.data, coeff.data

    def back(g):
        g_rows = g[seg]
        return (cd[:, None] * g_rows, (rd * g_rows).sum(axis=1))

    return make_result(out, "segment_weighted_rowsum", (rows, coeff), back)
