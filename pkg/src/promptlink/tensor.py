"""Dense-tensor core with reverse-mode differentiation.

Values are contiguous numpy arrays (float32 for training, float64 for
verification runs); every differentiable primitive wires an exact
vector-Jacobian product into the graph. Single-writer gradient
accumulation, deterministic reduction order.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an operation."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_KINK_MONITOR = None


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new leaf tensors."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (evaluation-only forwards)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class KinkMonitor:
    """Records how close a forward pass came to a non-smooth point.

    Installed by the gradient checker so evaluation points sitting on a
    ReLU/|x|/norm kink can be detected and resampled.
    """

    def __init__(self):
        self.min_gap = np.inf

    def observe(self, values):
        if values.size:
            gap = float(np.min(np.abs(values)))
            if gap < self.min_gap:
                self.min_gap = gap


@contextlib.contextmanager
def kink_monitor():
    global _KINK_MONITOR
    old = _KINK_MONITOR
    mon = KinkMonitor()
    _KINK_MONITOR = mon
    try:
        yield mon
    finally:
        _KINK_MONITOR = old


def _observe_kink(values):
    if _KINK_MONITOR is not None:
        _KINK_MONITOR.observe(values)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse mode.

    `grad`, when materialized, always shares the tensor's shape. Tensors
    are immutable during a forward pass; the optimizer mutates `data` of
    leaf parameters directly, outside any graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, name=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp
        self.name = name

    # -- construction -----------------------------------------------------

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- autodiff ----------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of `self` into every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"backward: seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        # pending gradients: array plus an "owned" flag. VJPs may hand the
        # same array (or views of it) to several parents, so in-place
        # accumulation is only legal on arrays this loop allocated itself.
        pending = {id(self): grad}
        owned = set()
        for t in order:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            owned.discard(id(t))
            t.grad = g if t.grad is None else t.grad + g
            if t._vjp is None:
                continue
            parent_grads = t._vjp(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = pg.reshape(p.data.shape)
                key = id(p)
                prev = pending.get(key)
                if prev is None:
                    pending[key] = pg
                elif key in owned:
                    prev += pg
                else:
                    pending[key] = prev + pg
                    owned.add(key)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False, dtype=None, name=None):
    """Leaf constructor; casts to the active default dtype."""
    arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def constant(data, dtype=None):
    arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr)


def _topo_order(root):
    """Reverse topological order, iterative (graphs can be thousands deep)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return list(reversed(order))


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _make(data, parents, vjp):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp)
    return Tensor(data)


def _sum_to_shape(g, shape):
    """Collapse gradient `g` of a broadcast result back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _sum_to_shape(g * bd, ad.shape), _sum_to_shape(g * ad, bd.shape)

    return _make(out, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _sum_to_shape(g / bd, ad.shape)
        gb = _sum_to_shape(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = _as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    out = a.data ** p
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1),)

    return _make(out, (a,), vjp)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a):
    a = _as_tensor(a)
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(out, (a,), vjp)


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    _observe_kink(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp)


def relu(a):
    a = _as_tensor(a)
    _observe_kink(a.data)
    mask = a.data > 0  # subgradient at 0 is 0
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        # stacked @ plain-matrix is the hot path: collapse the stack into
        # one gemm instead of a batched matmul followed by a reduction
        if bd.ndim == 2:
            ga = np.matmul(g, bd.T)
            gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            return _sum_to_shape(ga, ad.shape), gb
        ga = _sum_to_shape(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(out, (a,), vjp)


def transpose(a, axes):
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def slice_(a, key):
    a = _as_tensor(a)
    out = a.data[key]
    shape = a.data.shape
    dtype = a.data.dtype

    def vjp(g):
        buf = np.zeros(shape, dtype=dtype)
        np.add.at(buf, key, g)
        return (buf,)

    return _make(out, (a,), vjp)


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([shape[ax] for ax in axis]))
    else:
        n = shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def l2_norm(a, axis=-1):
    """Euclidean norm along `axis`; subgradient 0 at the origin."""
    a = _as_tensor(a)
    sq = np.sum(a.data * a.data, axis=axis)
    out = np.sqrt(sq)
    _observe_kink(out)
    ad = a.data

    def vjp(g):
        denom = np.where(out == 0, 1.0, out)
        scale = (g / denom)
        scale = np.where(out == 0, 0.0, scale)
        return (np.expand_dims(scale, axis) * ad,)

    return _make(out, (a,), vjp)


def l1_norm(a, axis=-1):
    """Sum of absolute values along `axis`; subgradient 0 at kinks."""
    a = _as_tensor(a)
    _observe_kink(a.data)
    out = np.sum(np.abs(a.data), axis=axis)
    sign = np.sign(a.data)

    def vjp(g):
        return (np.expand_dims(g, axis) * sign,)

    return _make(out, (a,), vjp)


# -- softmax family -----------------------------------------------------------

def log_softmax(a, axis=-1):
    """Numerically stable log-softmax (log-sum-exp shifted by the max)."""
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


# -- normalization ------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with learned scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    n = xd.shape[-1]
    gshape, bshape = gamma.data.shape, beta.data.shape

    def vjp(g):
        dxhat = g * gamma.data
        sum_dxhat = dxhat.sum(axis=-1, keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (inv / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = _sum_to_shape((g * xhat).sum(axis=reduce_axes), gshape)
        dbeta = _sum_to_shape(g.sum(axis=reduce_axes), bshape)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp)


# -- gather / scatter ---------------------------------------------------------

def embedding(table, indices):
    """Row gather from a 2-D table; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    out = table.data[idx]
    shape = table.data.shape
    dtype = table.data.dtype

    def vjp(g):
        buf = np.zeros(shape, dtype=dtype)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (buf,)

    return _make(out, (table,), vjp)


def take_along_last(a, indices):
    """Per-row gather on the last axis: out[..., j] = a[..., indices[..., j]]."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    out = np.take_along_axis(a.data, idx, axis=-1)
    shape = a.data.shape
    dtype = a.data.dtype

    def vjp(g):
        buf = np.zeros(shape, dtype=dtype)
        lead = np.indices(idx.shape)[:-1] if idx.ndim > 1 else ()
        if idx.ndim == 1:
            np.add.at(buf, idx, g)
        else:
            np.add.at(buf, (*lead, idx), g)
        return (buf,)

    return _make(out, (a,), vjp)


# -- convolution --------------------------------------------------------------

def conv2d(x, w, b=None, padding=0):
    """2-D convolution, stride 1, zero padding; im2col forward, col2im backward.

    x: (B, C_in, H, W); w: (C_out, C_in, kh, kw); b: (C_out,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    p = int(padding)
    oh, ow = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (B, C, oh, ow, kh, kw) -> cols (B, oh*ow, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, oh * ow, C * kh * kw)
    wf = w.data.reshape(Co, -1)
    out2 = np.matmul(cols, wf.T)  # (B, oh*ow, Co)
    out = out2.transpose(0, 2, 1).reshape(B, Co, oh, ow)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data.reshape(1, Co, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(B, Co, oh * ow).transpose(0, 2, 1)  # (B, oh*ow, Co)
        gw = np.tensordot(g2, cols, axes=((0, 1), (0, 1))).reshape(Co, C, kh, kw)
        gcols = np.matmul(g2, wf)  # (B, oh*ow, C*kh*kw)
        gwin = gcols.reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + oh, j:j + ow] += gwin[:, :, :, :, i, j]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(out, parents, vjp)


def dropout(a, p, rng):
    """Inverted dropout with an externally seeded generator; p=0 is identity."""
    if p <= 0:
        return _as_tensor(a)
    a = _as_tensor(a)
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = a.data * keep

    def vjp(g):
        return (g * keep,)

    return _make(out, (a,), vjp)
