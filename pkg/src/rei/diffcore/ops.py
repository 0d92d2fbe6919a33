"""Differentiable primitives.

Every function takes ``Var`` or array inputs. If none of the inputs is a
``Var`` the result is a plain array and nothing is recorded.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tape import Tape, Var, as_array, value_of


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _out(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    vars_ = [x for x in inputs if isinstance(x, Var)]
    mask = [isinstance(x, Var) for x in inputs]

    def node_vjp(g):
        gs = vjp(g)
        return [gi for gi, m in zip(gs, mask) if m]

    return tape.record(value, vars_, node_vjp)


# ---- elementwise ---------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _out(av + bv, (a, b),
                lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _out(av - bv, (a, b),
                lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _out(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(x):
    xv = value_of(x)
    return _out(xv * xv, (x,), lambda g: (2.0 * xv * g,))


def relu(x):
    xv = value_of(x)
    pos = xv > 0
    return _out(np.where(pos, xv, 0.0), (x,), lambda g: (g * pos,))


def exp(x):
    y = np.exp(value_of(x))
    return _out(y, (x,), lambda g: (g * y,))


def log(x):
    xv = value_of(x)
    if np.any(xv <= 0):
        raise FloatingPointError("log of a nonpositive value")
    return _out(np.log(xv), (x,), lambda g: (g / xv,))


def clamp_min(x, lo: float):
    xv = value_of(x)
    keep = xv >= lo
    return _out(np.where(keep, xv, lo), (x,), lambda g: (g * keep,))


def stop_gradient(x):
    return value_of(x)


# ---- reductions / shape --------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    xv = value_of(x)
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % xv.ndim for a in axes)
        shape = [1 if i in axes else n for i, n in enumerate(xv.shape)]
        return (np.broadcast_to(np.reshape(g, shape), xv.shape).copy(),)

    return _out(np.asarray(out, dtype=np.float64), (x,), vjp)


def item_sum(x):
    """Per-item sum over every axis but the leading batch axis."""
    return sum(x, axis=tuple(range(1, value_of(x).ndim)))


def mean(x):
    return mul(sum(x), 1.0 / value_of(x).size)


def dot(a, b):
    return sum(mul(a, b))


def reshape(x, shape):
    xv = value_of(x)
    return _out(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def index(x, key):
    xv = value_of(x)

    def vjp(g):
        full = np.zeros_like(xv)
        if _is_fancy(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _out(np.array(xv[key]), (x,), vjp)


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(xs: Sequence, axis: int = 0):
    vals = [value_of(x) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _out(np.concatenate(vals, axis=axis), tuple(xs), vjp)


def split(x, sizes: Sequence[int], axis: int = 0):
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    out = []
    start = 0
    nd = value_of(x).ndim
    for n in sizes:
        key = [slice(None)] * nd
        key[axis] = slice(start, start + n)
        out.append(index(x, tuple(key)))
        start += n
    return out


# ---- linear maps ---------------------------------------------------------

def linear(x, forward: Callable[[np.ndarray], np.ndarray],
           adjoint: Callable[[np.ndarray], np.ndarray]):
    """Apply a fixed linear map given by its forward and adjoint actions."""
    return _out(forward(value_of(x)), (x,), lambda g: (adjoint(g),))


def matvec(M: np.ndarray, x):
    """``M @ x_i`` for every item of a batch of flat vectors ``x`` (N, n)."""
    M = as_array(M)
    return linear(x, lambda v: v @ M.T, lambda g: g @ M)


# ---- convolutional building blocks ---------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # (n, h, w, c, k, k) -> (n, h, w, k, k, c) so a row matches the weight layout
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * h * w, k * k * c)


def conv2d(x, w, b):
    """Same-padded stride-1 2-D cross-correlation, channels-last.

    ``x`` is (N, H, W, C), ``w`` is (k, k, C, O) with odd ``k``, ``b`` is (O,).
    """
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    n, h, wd, c = xv.shape
    k, k2, c2, o = wv.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: x {xv.shape}, w {wv.shape}")
    cols = _im2col(xv, k)
    wmat = wv.reshape(k * k * c, o)
    out = (cols @ wmat + bv).reshape(n, h, wd, o)

    def vjp(g):
        g2 = g.reshape(n * h * wd, o)
        gw = (cols.T @ g2).reshape(wv.shape)
        gb = g2.sum(axis=0)
        if not isinstance(x, Var):
            return None, gw, gb
        # input gradient is a same-padded correlation with the flipped kernel
        wflip = wv[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * o, c)
        gx = (_im2col(g, k) @ wflip).reshape(n, h, wd, c)
        return gx, gw, gb

    return _out(out, (x, w, b), vjp)


def avg_pool2(x):
    """2x2 average pooling of a channels-last (N, H, W, C) batch."""
    xv = value_of(x)
    n, h, w, c = xv.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even extents, got {xv.shape}")
    out = xv.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _out(out, (x,), vjp)


def upsample2(x):
    """Nearest-neighbour 2x upsampling of a channels-last batch."""
    xv = value_of(x)
    n, h, w, c = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _out(out, (x,), vjp)


def transpose(x, axes):
    xv = value_of(x)
    inv = np.argsort(axes)
    return _out(np.ascontiguousarray(xv.transpose(axes)), (x,),
                lambda g: (g.transpose(inv),))
