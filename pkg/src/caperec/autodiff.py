"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every op records its inputs and a closure mapping the upstream gradient to
input gradients. :meth:`Tensor.backward` walks the recorded graph in reverse
topological order, accumulates ``.grad`` on leaves, then consumes the graph.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import DegenerateRowError, DimensionError, GraphStateError

BCE_EPS = 1e-7

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _sigmoid(x):
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def one_minus_sigmoid(x):
    """``1 - sigmoid(x)`` evaluated as ``sigmoid(-x)`` to keep precision near 1."""
    s = _sigmoid(-x.data)
    return _make(s, (x,), lambda g: (-g * s * (1.0 - s),))


def silu(x):
    s = _sigmoid(x.data)
    out = x.data * s

    def back(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (x,), back)


def clamp(x, lo, hi):
    """Clip values to ``[lo, hi]``; gradient is zero where clipping is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,))


def masked_fill(x, mask, value=0.0):
    """Replace entries where ``mask`` is False with ``value``."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.data, value)
    return _make(out, (x,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), x.shape),))


# ---------------------------------------------------------------- reductions & shape


def tsum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), back)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a, b):
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, index):
    out = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (x,), back)


def concat_lastdim(parts):
    """Concatenate along the last axis; backward splits the gradient back."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_lastdim needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim leading shapes differ: {parts[0].shape} vs {p.shape}"
            )
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def back(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _make(out, tuple(parts), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)


def gather_rows(table, ids):
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"ids must be integers, got dtype {ids.dtype}")
    ids = ids.astype(np.int64)
    vocab = table.shape[0]
    if ids.size:
        bad = ids[(ids < 0) | (ids >= vocab)]
        if bad.size:
            raise IndexError(f"id {int(bad[0])} out of range for table with V={vocab} rows")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        kernels.scatter_add_rows(full, ids.ravel(), g.reshape(ids.size, *table.shape[1:]))
        return (full,)

    return _make(out, (table,), back)


# ---------------------------------------------------------------- attention pieces


def softmax_lastdim(x, mask=None):
    """Max-subtracted softmax over the last axis.

    Entries where ``mask`` is False get weight exactly 0. A row with no
    unmasked entry raises :class:`DegenerateRowError`.
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if data.shape[-1] == 0 or not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row is fully masked")
        shifted = np.where(mask, data, -np.inf)
    else:
        shifted = data
    m = np.max(shifted, axis=-1, keepdims=True)
    e = np.exp(shifted - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def back(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (x,), back)


def reverse_cumsum(x):
    """``out[..., j] = sum(x[..., j:])``; backward is a forward cumulative sum."""
    if x.shape[-1] < 1:
        raise DimensionError(f"reverse_cumsum needs a non-empty last axis, got {x.shape}")
    out = np.flip(np.cumsum(np.flip(x.data, -1), axis=-1), -1).copy()
    return _make(out, (x,), lambda g: (np.cumsum(g, axis=-1),))


def interp_logits(z, positions):
    """Interpolate each row of ``z`` at fractional ``positions``.

    ``z`` has shape (..., P) and ``positions`` (..., n) with the same leading
    axes; positions must already lie in ``[0, P-1]``. Result has shape (..., n):
    ``(p - floor p) * z[floor p + 1] + (1 - p + floor p) * z[floor p]``.
    """
    if z.shape[:-1] != positions.shape[:-1]:
        raise DimensionError(
            f"interp_logits leading shapes differ: {z.shape} vs {positions.shape}"
        )
    lead = z.shape[:-1]
    width = z.shape[-1]
    z2 = z.data.reshape(-1, width)
    p2 = positions.data.reshape(-1, positions.shape[-1])
    out = kernels.interp_gather(z2, p2).reshape(positions.shape)

    def back(g):
        gz, gp = kernels.interp_scatter(z2, p2, g.reshape(p2.shape))
        return gz.reshape(lead + (width,)), gp.reshape(positions.shape)

    return _make(out, (z, positions), back)


def rope_frequencies(dim, base=10000.0):
    if dim % 2:
        raise DimensionError(f"rotary dimension must be even, got {dim}")
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


def rope_rotate(x, positions, base=10000.0):
    """Rotate consecutive pairs of the last axis by ``position * theta_i``.

    ``positions`` broadcasts against ``x.shape[:-1]``.
    """
    theta = rope_frequencies(x.shape[-1], base)
    angle = np.asarray(positions, dtype=np.float64)[..., None] * theta
    cos, sin = np.cos(angle), np.sin(angle)

    def rotate(data, sign):
        even, odd = data[..., 0::2], data[..., 1::2]
        out = np.empty(np.broadcast_shapes(data.shape, angle.shape[:-1] + (data.shape[-1],)))
        out[..., 0::2] = even * cos - sign * odd * sin
        out[..., 1::2] = sign * even * sin + odd * cos
        return out

    out = rotate(x.data, 1.0)
    return _make(out, (x,), lambda g: (_unbroadcast(rotate(g, -1.0), x.shape),))


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        width = x.shape[-1]
        gx = inv / width * (
            width * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back)


# ---------------------------------------------------------------- loss


def bce_loss(p, y):
    """Mean binary cross-entropy with ``p`` clamped to ``[eps, 1-eps]``."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss shapes differ: {p.shape} vs {y.shape}")
    raw = p.data
    pc = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    n = max(raw.size, 1)
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / n
    inside = (raw >= BCE_EPS) & (raw <= 1.0 - BCE_EPS)

    def back(g):
        return (g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

    return _make(np.asarray(loss), (p,), back)


def bce_with_logits(logits, y):
    """BCE of ``sigmoid(logits)``; same clamp as :func:`bce_loss`."""
    return bce_loss(sigmoid(logits), y)


# ---------------------------------------------------------------- backward pass


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The graph is consumed:
    calling this twice on the same result raises :class:`GraphStateError`.
    """
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph; re-run the forward pass")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any tensor requiring grad")

    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
            else:
                node.grad = node.grad + g
            continue
        if g is None:
            g = np.zeros_like(node.data)
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._consumed = True


def numerical_gradient(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


__all__ = [
    "BCE_EPS",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "bce_loss",
    "bce_with_logits",
    "clamp",
    "concat_lastdim",
    "gather_rows",
    "getitem",
    "interp_logits",
    "layer_norm",
    "masked_fill",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numerical_gradient",
    "one_minus_sigmoid",
    "relative_error",
    "reshape",
    "reverse_cumsum",
    "rope_frequencies",
    "rope_rotate",
    "sigmoid",
    "silu",
    "softmax_lastdim",
    "sub",
    "swapaxes",
    "tsum",
]
