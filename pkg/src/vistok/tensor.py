"""Minimal reverse-mode autodiff on dense numpy arrays.

A Tensor wraps a float32/float64 ndarray and, when gradients are enabled,
remembers its parents and a backward closure. ``backward()`` does an
iterative topological walk (graphs from autoregressive decoding get deep,
so no recursion). Everything is single-threaded and deterministic.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference, EMA updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Shape/axis disagreement between operands."""


class GradientMissing(RuntimeError):
    """An optimizer step was asked for before any backward pass."""


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        # iterative post-order topological sort
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def power(a, exponent):
    a = _wrap(a)
    data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _node(data, (a,), backward)


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def sqrt(a):
    return power(a, 0.5)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _node(data, (a,), backward)


def sigmoid(a):
    a = _wrap(a)
    # stable in both tails
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))), np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    data = data.astype(a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), backward)


def tanh(a):
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _node(data, (a,), backward)


# -- reductions and shape ----------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _node(data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a, axis, keepdims=False):
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        expanded = data if keepdims else np.expand_dims(data, axis)
        gexp = g if keepdims else np.expand_dims(g, axis)
        mask = a.data == expanded
        # split gradient across ties so the sum is preserved
        counts = mask.sum(axis=axis, keepdims=True)
        a._accumulate(mask * gexp / counts)

    return _node(data, (a,), backward)


def reshape(a, shape):
    a = _wrap(a)
    old_shape = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old_shape))

    return _node(data, (a,), backward)


def transpose(a, axes=None):
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _node(data, (a,), backward)


def swap_last_two(a):
    order = list(range(a.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return transpose(a, tuple(order))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(data, tuple(tensors), backward)


def take(a, key):
    """Basic indexing/slicing; backward scatters into zeros."""
    a = _wrap(a)
    data = a.data[key]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, key, g)
            a._accumulate(buf)

    return _node(data, (a,), backward)


def stop_gradient(a):
    a = _wrap(a)
    return Tensor(a.data)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def linear(x, weight, bias=None):
    """x[..., in] @ weight[out, in]^T + bias[out]."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} vs weight {weight.shape}")
    out = matmul(x, swap_last_two(weight) if weight.ndim > 1 else weight)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding_lookup(table, ids):
    """Gather rows of table[V, D] by an integer array of ids."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(buf)

    return _node(data, (table,), backward)


# -- softmax family ----------------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate((g - dot) * data)

    return _node(data, (a,), backward)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), backward)


_NEG_INF = -1e30  # underflows to exactly 0 through exp, keeps masked weights at 0.0


def scaled_dot_product_attention(q, k, v, causal_mask=False):
    """Attention over [..., L, D] tensors; optional causal masking.

    Masked (future) positions receive weight exactly 0, so outputs are
    bit-invariant to their values.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention head dims disagree: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention key/value lengths disagree: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_last_two(k)), scale)
    if causal_mask:
        lq, lk = q.shape[-2], k.shape[-2]
        if lq != lk:
            raise DimensionError(f"causal attention needs square scores, got {lq}x{lk}")
        mask = np.triu(np.full((lq, lk), _NEG_INF, dtype=scores.dtype), k=1)
        scores = add(scores, Tensor(mask))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


# -- normalization -----------------------------------------------------------


def group_norm(x, num_groups, weight, bias, eps=1e-5):
    """Normalize x[N, C, ...] within channel groups; affine per channel."""
    n, c = x.shape[0], x.shape[1]
    if c % num_groups:
        raise DimensionError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    spatial = x.shape[2:]
    g = reshape(x, (n, num_groups, -1))
    mu = reduce_mean(g, axis=2, keepdims=True)
    centered = add(g, mul(mu, -1.0))
    var = reduce_mean(mul(centered, centered), axis=2, keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    normed = reshape(normed, (n, c) + spatial)
    shape = (1, c) + (1,) * len(spatial)
    return add(mul(normed, reshape(weight, shape)), reshape(bias, shape))


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalize over the last axis; affine over the last axis."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    return add(mul(normed, weight), bias)


# -- convolution -------------------------------------------------------------


def _im2col(x, k, stride, padding):
    """x[N,C,H,W] -> cols[N, Ho*Wo, C*k*k] plus output spatial dims."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv window k={k} does not fit input {h}x{w} with padding {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N, C, Ho, Wo, k, k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, n, c, h, w, k, stride, padding, ho, wo):
    """Adjoint of _im2col: scatter-add cols back onto the padded image."""
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    if padding:
        return xp[:, :, padding : padding + h, padding : padding + w]
    return xp


def reflect_pad2d(x, pad):
    """Pad the last two axes by mirroring without repeating the border row.

    A constant image stays constant after padding, so convolutions stacked on
    this op cannot read their own position out of the border the way they can
    with zero padding.
    """
    x = _wrap(x)
    if pad < 0:
        raise DimensionError(f"reflect_pad2d wants a nonnegative pad, got {pad}")
    if pad == 0:
        return x
    if x.ndim < 2:
        raise DimensionError(f"reflect_pad2d wants at least 2 axes, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h <= pad or w <= pad:
        raise DimensionError(f"cannot reflect-pad {h}x{w} by {pad}; need more than {pad} rows")
    iy = np.concatenate([np.arange(pad, 0, -1), np.arange(h), np.arange(h - 2, h - 2 - pad, -1)])
    ix = np.concatenate([np.arange(pad, 0, -1), np.arange(w), np.arange(w - 2, w - 2 - pad, -1)])
    data = x.data[..., iy[:, None], ix[None, :]]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (Ellipsis, iy[:, None], ix[None, :]), g)
            x._accumulate(gx)

    return _node(data, (x,), backward)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x[N,C,H,W] with weight[O,C,k,k]."""
    x = _wrap(x)
    weight = _wrap(weight, like=x)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d wants 4d input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv2d channel/kernel mismatch: input {x.shape} vs weight {weight.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T  # N, Ho*Wo, O
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(n, o, ho, wo)

    def backward(g):
        gmat = g.reshape(n, o, ho * wo).transpose(0, 2, 1)  # N, HoWo, O
        if weight.requires_grad:
            gw = np.einsum("nlo,nlc->oc", gmat, cols, optimize=True)
            weight._accumulate(gw.reshape(o, c, k, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = gmat @ wmat  # N, HoWo, C*k*k
            x._accumulate(_col2im(gcols, n, c, h, w, k, stride, padding, ho, wo))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of conv2d: x[N,C,H,W], weight[C,O,k,k] -> [N,O,H',W'].

    H' = (H-1)*stride - 2*padding + k; with k=4, stride=2, padding=1 this is
    exactly 2H.
    """
    x = _wrap(x)
    weight = _wrap(weight, like=x)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv_transpose2d wants 4d input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cw, o, k, k2 = weight.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv_transpose2d channel/kernel mismatch: input {x.shape} vs weight {weight.shape}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d output collapsed: {ho}x{wo}")
    xmat = x.data.reshape(n, c, h * w).transpose(0, 2, 1)  # N, HW, C
    wmat = weight.data.reshape(c, o * k * k)
    cols = xmat @ wmat  # N, HW, O*k*k
    out = _col2im(cols, n, o, ho, wo, k, stride, padding, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gcols, gh, gw_ = _im2col(g, k, stride, padding)  # N, HW, O*k*k
        if x.requires_grad:
            gx = gcols @ wmat.T  # N, HW, C
            x._accumulate(gx.transpose(0, 2, 1).reshape(n, c, h, w))
        if weight.requires_grad:
            gwm = np.einsum("nlc,nlk->ck", xmat, gcols, optimize=True)
            weight._accumulate(gwm.reshape(c, o, k, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


# -- losses ------------------------------------------------------------------


def masked_cross_entropy(logits, targets, ignore_flags=None):
    """Mean NLL over non-ignored rows of logits[N, K].

    Ignored rows contribute exactly zero loss and zero gradient; an
    all-ignored batch returns 0.
    """
    logits = _wrap(logits)
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(n)
    if ignore_flags is None:
        keep = np.ones(n, dtype=bool)
    else:
        keep = ~np.asarray(ignore_flags, dtype=bool).reshape(n)
    active = targets[keep]
    if active.size and (active.min() < 0 or active.max() >= k):
        bad = int(np.flatnonzero(keep)[np.argmax((active < 0) | (active >= k))])
        raise IndexError(f"target {targets[bad]} out of vocabulary [0, {k}) at position {bad}")
    count = int(keep.sum())
    safe_targets = np.where(keep, targets, 0)
    logp = log_softmax(logits, axis=-1)
    picked = take(logp, (np.arange(n), safe_targets))
    masked = mul(picked, Tensor(keep.astype(logits.dtype)))
    return mul(reduce_sum(masked), -1.0 / max(count, 1))


def masked_mse(pred, target, valid=None):
    """Mean squared error over valid entries; no valid entries -> 0."""
    pred = _wrap(pred)
    target = _wrap(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"masked_mse shapes disagree: {pred.shape} vs {target.shape}")
    if valid is None:
        mask = np.ones(pred.shape, dtype=pred.dtype)
    else:
        mask = np.asarray(valid).astype(pred.dtype)
        if mask.shape != pred.shape:
            raise DimensionError(f"masked_mse mask shape {mask.shape} vs {pred.shape}")
    count = float(mask.sum())
    diff = mul(add(pred, mul(target, -1.0)), Tensor(mask))
    return mul(reduce_sum(mul(diff, diff)), 1.0 / max(count, 1.0))


def bce_with_logits(logits, targets, valid=None):
    """Mean binary cross entropy over valid entries, computed stably."""
    logits = _wrap(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce shapes disagree: {logits.shape} vs {t.shape}")
    if valid is None:
        mask = np.ones(logits.shape, dtype=logits.dtype)
    else:
        mask = np.asarray(valid).astype(logits.dtype)
    count = float(mask.sum())
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    data = (loss * mask).sum() / max(count, 1.0)
    data = np.asarray(data, dtype=logits.dtype)

    def backward(g):
        if logits.requires_grad:
            p = 1.0 / (1.0 + np.exp(-x))
            logits._accumulate(g * (p - t) * mask / max(count, 1.0))

    return _node(data, (logits,), backward)
