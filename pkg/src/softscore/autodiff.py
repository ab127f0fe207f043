"""Reverse-mode automatic differentiation over numpy float64 arrays.

Tensors record the primitive that produced them (an eager tape), so any
value doubles as a computation graph rooted at itself.  ``backward`` walks
that record in reverse topological order and accumulates gradients into the
leaves that asked for them.  Everything is 64-bit and deterministic: the
same inputs produce bit-identical values and gradients.
"""

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe hits a non-finite value."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- unary / reductions ------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def clamp_min(self, floor):
        return clamp_min(self, floor)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap an op result, recording the tape entry only when a parent wants
    gradients and recording is enabled."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}") from None


# -- elementwise primitives -------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def addn(*ts):
    """Sum of several same-shaped tensors in one node (fixed order)."""
    ts = [_as_tensor(t) for t in ts]
    total = ts[0].data.copy()
    for t in ts[1:]:
        if t.data.shape != ts[0].data.shape:
            raise ShapeError(f"addn: mixed shapes {ts[0].data.shape} and {t.data.shape}")
        total += t.data

    def bw(g):
        for t in ts:
            if t.requires_grad:
                _accum(t, g)

    return _make(total, ts, bw)


def neg(a):
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("multiply", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("divide", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bw)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def pow_const(a, p):
    a = _as_tensor(a)
    p = float(p)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), bw)


def relu(a):
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = _as_tensor(a)
    floor = float(floor)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (a.data > floor))

    return _make(np.maximum(a.data, floor), (a,), bw)


# -- reductions --------------------------------------------------------------


def _restore_axes(g, axis, keepdims, in_shape):
    if keepdims or axis is None:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in sorted(a % len(in_shape) for a in axes):
        g = np.expand_dims(g, ax)
    return g


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            gg = _restore_axes(np.asarray(g), axis, keepdims, a.data.shape)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.data.shape[ax] for ax in axes)

    def bw(g):
        if a.requires_grad:
            gg = _restore_axes(np.asarray(g), axis, keepdims, a.data.shape)
            _accum(a, np.broadcast_to(gg, a.data.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def tmax(a, axis=None, keepdims=False):
    """Max reduction; the gradient flows only to the first (lowest-index)
    maximal element along each reduced slice."""
    a = _as_tensor(a)
    if axis is None:
        flat_idx = int(np.argmax(a.data))

        def bw(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf.flat[flat_idx] = float(g)
                _accum(a, buf)

        return _make(a.data.max(), (a,), bw)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def bw(g):
        if a.requires_grad:
            gg = _restore_axes(np.asarray(g), axis, keepdims, a.data.shape)
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, idx, np.take_along_axis(np.broadcast_to(gg, a.data.shape), idx, axis), axis)
            _accum(a, buf)

    return _make(a.data.max(axis=axis, keepdims=keepdims), (a,), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def take_rows(table, ids):
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-d, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.data.shape[0]} rows")

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(table.data[ids], (table,), bw)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.data.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), bw)


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.swapaxes(ax1, ax2))

    return _make(a.data.swapaxes(ax1, ax2), (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), bw)


def getitem(a, key):
    """Basic (slice/int) indexing with gradient scatter into the source."""
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[key] += g

    return _make(a.data[key], (a,), bw)


# -- normalizations ----------------------------------------------------------


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            _accum(a, (g - (g * p).sum(axis=axis, keepdims=True)) * p)

    return _make(p, (a,), bw)


def sparsemax_values(z):
    """Euclidean projection of the last axis onto the probability simplex.

    Sort descending, keep the largest k with 1 + k*z_(k) > sum_{j<=k} z_(j),
    subtract the threshold, clip at zero.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("sparsemax: non-finite input")
    # The projection is shift-invariant; canonicalizing at the max keeps the
    # arithmetic identical for exactly-representable shifts and bounds the
    # cumsum magnitudes.
    z = z - z.max(axis=-1, keepdims=True)
    v = z.shape[-1]
    zs = np.flip(np.sort(z, axis=-1), axis=-1)
    cumsum = np.cumsum(zs, axis=-1)
    rho = np.arange(1, v + 1, dtype=np.float64)
    support = 1.0 + rho * zs > cumsum
    k = np.count_nonzero(support, axis=-1, keepdims=True)
    theta = (np.take_along_axis(cumsum, k - 1, axis=-1) - 1.0) / k
    return np.maximum(z - theta, 0.0)


def sparsemax_grad(p, upstream):
    """Jacobian-vector product of sparsemax at output p (support from p > 0)."""
    support = (p > 0.0).astype(np.float64)
    k = support.sum(axis=-1, keepdims=True)
    inner = (upstream * support).sum(axis=-1, keepdims=True) / k
    return support * (upstream - inner)


def sparsemax(a):
    """Simplex-projection primitive along the last axis."""
    a = _as_tensor(a)
    p = sparsemax_values(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, sparsemax_grad(p, g))

    return _make(p, (a,), bw)


def l2_normalize(a, axis=-1, eps=1e-12):
    """x / max(||x||, eps) along `axis`; the floor guards degenerate rows."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = a.data / denom

    def bw(g):
        if a.requires_grad:
            dot = (y * g).sum(axis=axis, keepdims=True)
            # Below the floor the denominator is the constant eps.
            grad = np.where(norm > eps, (g - y * dot) / denom, g / denom)
            _accum(a, grad)

    return _make(y, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc / sigma
    out = gain.data * xh + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xh, gain.data.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxh = g * gain.data
            term = dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True)
            _accum(x, term / sigma)

    return _make(out, (x, gain, bias), bw)


# -- traversal ---------------------------------------------------------------


def _topo(root):
    """Ancestors of `root` in topological order (iterative DFS)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into `.grad` of every participating leaf.

    Tensors with requires_grad unset are never touched; leaves off the path
    to the loss keep `.grad is None` (read as exact zero).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss, leaves):
    """Run backward and return {leaf: gradient array} for the given leaves.

    Non-participating leaves map to exact zeros.
    """
    for leaf in leaves:
        if not leaf.requires_grad:
            raise ValueError("gradients: leaf does not require grad")
    backward(loss)
    return {t: (t.grad if t.grad is not None else np.zeros_like(t.data)) for t in leaves}


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# -- gradient checking -------------------------------------------------------


def grad_check(f, point, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps one Tensor to a scalar Tensor; `point` is the probe value.
    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x0 = np.asarray(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check: function must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise GradCheckError("grad_check: non-finite value at the probe point")
    backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x0)).ravel()

    flat = x0.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            with no_grad(), np.errstate(all="ignore"):
                y = f(Tensor(probe.reshape(x0.shape))).item()
            if not math.isfinite(y):
                raise GradCheckError(f"grad_check: non-finite value at coordinate {i}")
            vals.append(y)
        numeric[i] = (vals[0] - vals[1]) / (2.0 * step)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
