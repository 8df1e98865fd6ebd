"""Differentiable primitives.

Each function takes :class:`Tensor` (or array) inputs and returns a Tensor
whose backward closure writes exact gradients into the parents. Layouts:
images and point features both keep channels last: ``(B, H, W, C)`` and
``(..., C)``.
"""
from __future__ import annotations

import contextlib
import hashlib

import numpy as np
from scipy import sparse

from ..errors import ShapeError, ValidationError
from .tensor import Tensor, as_tensor, make_node

__all__ = [
    "add", "sub", "mul", "relu", "reshape", "transpose", "concat",
    "linear", "gather_rows", "scatter_add_rows", "reduce_sum", "reduce_max",
    "reduce_mean", "conv2d", "maxpool2d", "conv_transpose2d", "batchnorm",
    "softmax_cross_entropy", "softmax", "log_softmax", "record_branches",
]


# Piecewise ops (relu, max) append their branch decisions here while a
# recording is active, so finite-difference checks can tell whether a
# perturbation moved the function onto a different linear piece.
_branch_log = None


@contextlib.contextmanager
def record_branches():
    """Collect a digest of every relu mask / argmax taken inside the block."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(arr):
    if _branch_log is not None:
        _branch_log.append(hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest())


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _operands(a, b):
    # plain Python numbers take the dtype of the tensor operand, so a float32
    # graph stays float32
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a = np.asarray(a, dtype=b.dtype)
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        b = np.asarray(b, dtype=a.dtype)
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward)


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    _log_branch(mask)

    def backward(g):
        x._accumulate(g * mask, owned=True)

    return make_node(x.data * mask, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return make_node(x.data.reshape(shape), (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                s != s0 for i, (s, s0) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]}")
    dtype = np.result_type(*[t.dtype for t in ts])
    data = np.concatenate([t.data.astype(dtype, copy=False) for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return make_node(data, ts, backward)


def linear(x, weight, bias=None) -> Tensor:
    """Shared affine map over the last axis: ``x @ W + b`` with W of shape (Cin, Cout)."""
    x, weight = as_tensor(x), as_tensor(weight)
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear expects last dim {cin}, got {x.shape}")
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape), owned=True)
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2, owned=True)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return make_node(out.reshape(*x.shape[:-1], cout), parents, backward)


def _scatter_rows(n, idx, rows, dtype):
    # sparse (n x m) selection matrix times rows; much faster than np.add.at
    m = idx.shape[0]
    sel = sparse.csr_matrix((np.ones(m, dtype=dtype), (idx, np.arange(m))), shape=(n, m))
    out = sel @ rows.reshape(m, -1)
    return np.asarray(out, dtype=dtype).reshape((n,) + rows.shape[1:])


def gather_rows(x, indices) -> Tensor:
    """``x[indices]`` for a 2-D (or higher) ``x`` and integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows index out of range")

    def backward(g):
        flat = g.reshape((idx.size,) + x.shape[1:])
        x._accumulate(_scatter_rows(x.shape[0], idx.ravel(), flat, x.dtype), owned=True)

    return make_node(x.data[idx], (x,), backward)


def scatter_add_rows(x, indices, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` output rows; row i goes to ``indices[i]``."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.shape[0] != x.shape[0]:
        raise ShapeError("scatter_add_rows needs one index per input row")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("scatter_add_rows index out of range")

    def backward(g):
        x._accumulate(g[idx])

    return make_node(_scatter_rows(n, idx, x.data, x.dtype), (x,), backward)


def reduce_sum(x, axis: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return make_node(x.data.sum(axis=axis), (x,), backward)


def reduce_mean(x, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g / n, axis), x.shape))

    return make_node(x.data.mean(axis=axis), (x,), backward)


def reduce_max(x, axis: int) -> Tensor:
    """Max over ``axis``; gradient goes to the first (lowest-index) argmax."""
    x = as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    _log_branch(arg)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        x._accumulate(gx, owned=True)

    return make_node(np.squeeze(out, axis), (x,), backward)


def _im2col(x, k):
    """(B, H, W, C) -> (B, H, W, k, k, C) zero-padded 'same' patches."""
    b, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    cols = np.empty((b, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + h, j:j + w]
    return cols


def _col2im(cols, k):
    b, h, w = cols.shape[:3]
    c = cols.shape[-1]
    p = k // 2
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + h, j:j + w] += cols[:, :, :, i, j]
    return xp[:, p:p + h, p:p + w]


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' convolution, zero padding, channels-last.

    ``x`` is (B, H, W, Cin); ``weight`` is (k, k, Cin, Cout) with odd k.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects x (B,H,W,C) and weight (k,k,Cin,Cout)")
    k, k2, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d expects {cin} input channels, got {x.shape[3]}")
    if k != k2 or k % 2 != 1:
        raise ShapeError("conv2d kernel must be square and odd")
    b, h, w, _ = x.shape
    if k == 1:
        cols2 = x.data.reshape(-1, cin)
    else:
        cols2 = _im2col(x.data, k).reshape(b * h * w, k * k * cin)
    w2 = weight.data.reshape(k * k * cin, cout)
    out = cols2 @ w2
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((cols2.T @ g2).reshape(weight.shape))
        if x.requires_grad:
            dcols = g2 @ w2.T
            if k == 1:
                x._accumulate(dcols.reshape(x.shape))
            else:
                x._accumulate(_col2im(dcols.reshape(b, h, w, k, k, cin), k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return make_node(out.reshape(b, h, w, cout), parents, backward)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling, stride 2, channels-last; ties route to the first window element."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial size, got {(h, w)}")
    win = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(
        b, h // 2, w // 2, 4, c)
    arg = np.argmax(win, axis=3)[:, :, :, None]
    _log_branch(arg)
    out = np.take_along_axis(win, arg, axis=3)[:, :, :, 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg, g[:, :, :, None], axis=3)
        gx = gw.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        x._accumulate(gx)

    return make_node(out, (x,), backward)


def conv_transpose2d(x, weight, bias=None) -> Tensor:
    """2x2 transposed convolution, stride 2, channels-last; weight (Cin, 2, 2, Cout)."""
    x, weight = as_tensor(x), as_tensor(weight)
    b, h, w, cin = x.shape
    if weight.ndim != 4 or weight.shape[0] != cin or weight.shape[1:3] != (2, 2):
        raise ShapeError(f"conv_transpose2d weight {weight.shape} incompatible with {x.shape}")
    cout = weight.shape[3]
    x2 = x.data.reshape(-1, cin)
    w2 = weight.data.reshape(cin, 4 * cout)
    out = (x2 @ w2).reshape(b, h, w, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(
        b, 2 * h, 2 * w, cout)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        if x.requires_grad:
            x._accumulate((g2 @ w2.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate((x2.T @ g2).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, cout).sum(axis=0))

    return make_node(np.ascontiguousarray(out), parents, backward)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, axis: int = -1, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over every axis except ``axis``.

    In training mode batch statistics are used (biased variance) and the
    running buffers are updated in place (unbiased variance); in eval mode
    the running statistics give a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ax = axis % x.ndim
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params must have shape ({c},)")
    m = x.data.size // c
    if training and m < 2:
        raise ValidationError("batchnorm in train mode needs more than one value per channel")
    # move channels last and flatten; every reduction is then over axis 0
    moved = np.moveaxis(x.data, ax, -1)
    flat = moved.reshape(-1, c)
    if training:
        mean = flat.mean(axis=0)
        xhat = flat - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        inv = (1.0 / np.sqrt(var + eps)).astype(flat.dtype)
        xhat *= inv
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(flat.dtype)
        xhat = (flat - running_mean) * inv
    out = xhat * gamma.data
    out += beta.data
    out = np.moveaxis(out.reshape(moved.shape), -1, ax)

    def backward(g):
        g2 = np.moveaxis(g, ax, -1).reshape(-1, c)
        gb = g2.sum(axis=0)
        gg = np.einsum("ij,ij->j", g2, xhat)
        if gamma.requires_grad:
            gamma._accumulate(gg)
        if beta.requires_grad:
            beta._accumulate(gb)
        if x.requires_grad:
            scale = gamma.data * inv
            if training:
                gx = xhat * (gg / m)
                gx += gb / m
                np.subtract(g2, gx, out=gx)
                gx *= scale
            else:
                gx = g2 * scale
            x._accumulate(np.moveaxis(gx.reshape(moved.shape), -1, ax), owned=True)

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis))


def softmax_cross_entropy(logits, labels, class_weights=None, ignore_label: int = -1) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[label]`` over non-ignored rows.

    With weights ``w``, the loss is ``sum_i w[y_i] * nll_i / sum_i w[y_i]``.
    Ignored rows contribute neither loss nor gradient; if every row is
    ignored the loss is 0.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (N, C) logits")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {y.shape[0]} labels")
    keep = y != ignore_label
    yk = y[keep]
    if yk.size and (yk.min() < 0 or yk.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c}) or equal ignore_label")
    w = np.ones(n, dtype=np.float64)
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (c,):
            raise ShapeError(f"class_weights must have shape ({c},)")
        w[keep] = cw[yk]
    w[~keep] = 0.0
    total = w.sum()
    rows = np.flatnonzero(keep)
    logp = log_softmax(logits.data.astype(np.float64, copy=False))
    if total > 0:
        loss = -(w[rows] * logp[rows, yk]).sum() / total
    else:
        loss = 0.0

    def backward(g):
        if total <= 0:
            logits._accumulate(np.zeros_like(logits.data))
            return
        grad = np.exp(logp)
        grad[rows, yk] -= 1.0
        grad *= (w / total)[:, None]
        logits._accumulate((grad * g).astype(logits.dtype, copy=False))

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
