"""Differentiable operations over Tensor.

Every op computes its forward value eagerly in numpy and, when any input
requires gradients, attaches a backward closure to the result. Fused ops
(conv2d, lstm_cell, linear) keep graphs small enough for single-core
training. Shapes are validated up front and raise ShapeMismatchError.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

# Pre-activation cap inside neg_exp: keeps exp() finite in float32 and the
# squared gradients finite inside Adam. -exp(25) ~ -7.2e10 is already far
# beyond the -1e9 additive masking scale.
NEG_EXP_CAP = 25.0


class ShapeMismatchError(ValueError):
    pass


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t.parents for t in ts)


def _node(data, parents, backward_fn) -> Tensor:
    if backward_fn is not None and _needs_grad(*parents):
        return Tensor(data, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad or a.parents:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b.parents:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad or a.parents:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b.parents:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad or a.parents:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b.parents:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a.accumulate_grad(-g)

    return _node(-a.data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0))

    return _node(out, (a,), backward)


def neg_exp(a) -> Tensor:
    """x -> -exp(x), saturating above NEG_EXP_CAP; output is always < 0."""
    a = _as_tensor(a)
    clipped = np.minimum(a.data, NEG_EXP_CAP)
    ex = np.exp(clipped)
    inside = a.data < NEG_EXP_CAP

    def backward(g):
        a.accumulate_grad(g * (-ex) * inside)

    return _node(-ex, (a,), backward)


def pow_int(a, n: int) -> Tensor:
    if not isinstance(n, int) or n < 1:
        raise ValueError("pow_int expects an integer exponent >= 1")
    a = _as_tensor(a)
    out = a.data ** n

    def backward(g):
        a.accumulate_grad(g * n * a.data ** (n - 1))

    return _node(out, (a,), backward)


# -- reductions and shaping --------------------------------------------------


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _node(out, (a,), backward)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ShapeMismatchError(f"dot needs equal 1-D shapes, got {a.shape} and {b.shape}")
    return sum_all(mul(a, b))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _node(out, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad or t.parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _node(out, tuple(ts), backward)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a.accumulate_grad(full)

    return _node(out, (a,), backward)


def repeat_rows(a, k: int) -> Tensor:
    """(B, ...) -> (B*k, ...): each row repeated k times consecutively."""
    a = _as_tensor(a)
    out = np.repeat(a.data, k, axis=0)

    def backward(g):
        a.accumulate_grad(g.reshape((a.data.shape[0], k) + a.data.shape[1:]).sum(axis=1))

    return _node(out, (a,), backward)


def tile0(a, n: int) -> Tensor:
    """Insert a new leading axis of size n by repetition."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.data.shape).copy()

    def backward(g):
        a.accumulate_grad(g.sum(axis=0))

    return _node(out, (a,), backward)


def max_over_axis(a, axis: int) -> Tensor:
    """Max reduction; gradient flows only to the first (lowest-index) argmax."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a.accumulate_grad(full)

    return _node(out, (a,), backward)


def elementwise_max(tensors) -> Tensor:
    """Elementwise max over equal-shape tensors (ties to the lowest index)."""
    ts = [_as_tensor(t) for t in tensors]
    shape = ts[0].data.shape
    for t in ts:
        if t.data.shape != shape:
            raise ShapeMismatchError("elementwise_max needs equal shapes")
    stacked = np.stack([t.data for t in ts], axis=0)
    idx = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad or t.parents:
                t.accumulate_grad(g * (idx == i))

    return _node(out, tuple(ts), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad or a.parents:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad or b.parents:
            b.accumulate_grad(a.data.T @ g)

    return _node(out, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """x @ w + b for x (B, in), w (in, out), b (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0] \
            or b.data.shape != (w.data.shape[1],):
        raise ShapeMismatchError(f"linear shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad or x.parents:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad or w.parents:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad or b.parents:
            b.accumulate_grad(g.sum(axis=0))

    return _node(out, (x, w, b), backward)


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate_grad(full)

    return _node(out, (table,), backward)


def gather_last(a, ids) -> Tensor:
    """a (B, V), ids (B,) -> (B,) picking a[i, ids[i]]."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, ids]

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, ids] = g
        a.accumulate_grad(full)

    return _node(out, (a,), backward)


# -- softmax family ----------------------------------------------------------


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis, computed stably in log space."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _node(out, (a,), backward)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        a.accumulate_grad(out * (g - inner))

    return _node(out, (a,), backward)


# -- convolution -------------------------------------------------------------

_CONV_CHUNK = 128  # grids per im2col block, bounds transient memory


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, H*W, C*9) patches for a 3x3 stride-1 same conv."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # windows: (N, C, H, W, 3, 3) -> (N, H*W, C*9)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * 9)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    cout = w.shape[0]
    wmat = w.reshape(cout, -1).T  # (C*9, Cout)
    out = np.empty((n, cout, h, wd), dtype=x.dtype)
    for lo in range(0, n, _CONV_CHUNK):
        hi = min(lo + _CONV_CHUNK, n)
        cols = _im2col(x[lo:hi])
        res = cols @ wmat + b
        out[lo:hi] = res.transpose(0, 2, 1).reshape(hi - lo, cout, h, wd)
    return out


def conv2d(x, w, b) -> Tensor:
    """3x3, stride-1, same-padding convolution on (N, C, H, W)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3) \
            or w.data.shape[1] != x.data.shape[1] or b.data.shape != (w.data.shape[0],):
        raise ShapeMismatchError(f"conv2d shapes x{x.shape} w{w.shape} b{b.shape}")
    out = _conv_forward(x.data, w.data, b.data)

    def backward(g):
        n, cout, h, wd = g.shape
        if b.requires_grad or b.parents:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if w.requires_grad or w.parents:
            dw = np.zeros((cout, x.data.shape[1] * 9), dtype=x.data.dtype)
            for lo in range(0, n, _CONV_CHUNK):
                hi = min(lo + _CONV_CHUNK, n)
                cols = _im2col(x.data[lo:hi])                      # (n', HW, C*9)
                gm = g[lo:hi].reshape(hi - lo, cout, h * wd)       # (n', Cout, HW)
                dw += np.einsum("nkp,npc->kc", gm, cols, optimize=True)
            w.accumulate_grad(dw.reshape(w.data.shape))
        if x.requires_grad or x.parents:
            # Data gradient is a same-pad conv of g with the flipped,
            # in/out-transposed kernel.
            wrot = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()
            zeros = np.zeros(wrot.shape[0], dtype=x.data.dtype)
            x.accumulate_grad(_conv_forward(g, wrot, zeros))

    return _node(out, (x, w, b), backward)


# -- LSTM ---------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One step of a standard 4-gate LSTM cell.

    x (B, in), h and c (B, H); w_ih (in, 4H), w_hh (H, 4H), b (4H,).
    Gate order along the last axis: input, forget, cell, output.
    Returns (h_next, c_next).
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    w_ih, w_hh, b = _as_tensor(w_ih), _as_tensor(w_hh), _as_tensor(b)
    hid = h.data.shape[1]
    if w_ih.data.shape != (x.data.shape[1], 4 * hid) or w_hh.data.shape != (hid, 4 * hid) \
            or b.data.shape != (4 * hid,) or c.data.shape != h.data.shape:
        raise ShapeMismatchError("lstm_cell shapes")

    gates = x.data @ w_ih.data + h.data @ w_hh.data + b.data
    i = _sigmoid(gates[:, :hid])
    f = _sigmoid(gates[:, hid:2 * hid])
    g_ = np.tanh(gates[:, 2 * hid:3 * hid])
    o = _sigmoid(gates[:, 3 * hid:])
    c_next = f * c.data + i * g_
    tanh_c = np.tanh(c_next)
    h_next = o * tanh_c
    packed = np.concatenate([h_next, c_next], axis=1)

    def backward(gpacked):
        dh = gpacked[:, :hid]
        dc = gpacked[:, hid:].copy()
        do = dh * tanh_c
        dc += dh * o * (1.0 - tanh_c * tanh_c)
        di = dc * g_
        df = dc * c.data
        dg = dc * i
        dgates = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g_ * g_), do * o * (1 - o)],
            axis=1,
        )
        if x.requires_grad or x.parents:
            x.accumulate_grad(dgates @ w_ih.data.T)
        if h.requires_grad or h.parents:
            h.accumulate_grad(dgates @ w_hh.data.T)
        if c.requires_grad or c.parents:
            c.accumulate_grad(dc * f)
        if w_ih.requires_grad or w_ih.parents:
            w_ih.accumulate_grad(x.data.T @ dgates)
        if w_hh.requires_grad or w_hh.parents:
            w_hh.accumulate_grad(h.data.T @ dgates)
        if b.requires_grad or b.parents:
            b.accumulate_grad(dgates.sum(axis=0))

    node = _node(packed, (x, h, c, w_ih, w_hh, b), backward)
    if node.parents:
        return narrow(node, 1, 0, hid), narrow(node, 1, hid, 2 * hid)
    # Forward-only path: skip the slicing nodes.
    return Tensor(h_next), Tensor(c_next)
