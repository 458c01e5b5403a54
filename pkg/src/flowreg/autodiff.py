"""Minimal reverse-mode differentiation over dense float64 arrays.

Only the primitives the registration network needs are provided. Variable
sized point sets are stored as flat ``[rows, channels]`` arrays with CSR-style
``offsets`` marking where each set starts, so shared-weight MLPs are a single
matmul and pooling is :func:`segment_max`.

Usage::

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    loss = sum_all(relu(matmul(constant(x), w)))
    tape.backward(loss)
    w.grad
"""
import numpy as np

from ._accel import NUMBA_ENABLED, njit
from .errors import EmptySetError, InvalidArgumentError, ShapeError

MAX_AXES = 3


class Tensor:
    __slots__ = ("value", "grad", "tape", "requires_grad", "is_leaf", "name")

    def __init__(self, value, tape=None, requires_grad=False, is_leaf=True, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > MAX_AXES:
            raise ShapeError(f"tensors have at most {MAX_AXES} axes, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf
        self.name = name
        self.grad = np.zeros_like(value) if (requires_grad and is_leaf) else None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(output, inputs, vjp)`` where ``vjp`` maps the output
    gradient to one gradient (or ``None``) per input.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None):
        return Tensor(value, tape=self, requires_grad=True, is_leaf=True, name=name)

    def record(self, out, inputs, vjp):
        self.nodes.append((out, inputs, vjp))

    def clear(self):
        """Drop all records.

        Tensors point back at their tape, so a finished tape is a reference
        cycle; clearing it lets the activations go without waiting for the gc.
        """
        self.nodes.clear()

    def backward(self, loss):
        """Accumulate ``d loss / d leaf`` into every leaf's ``grad``."""
        if loss.value.size != 1:
            raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.is_leaf:
            if loss.requires_grad:
                loss.grad += 1.0
            return
        grads = {id(loss): np.ones_like(loss.value)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t.grad += gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def constant(value):
    """Tensor that never receives a gradient."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(inputs):
    for t in inputs:
        if t.requires_grad and t.tape is not None:
            return t.tape
    return None


def _emit(value, inputs, vjp):
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape=tape, requires_grad=True, is_leaf=False)
    tape.record(out, inputs, vjp)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- primitives -------------------------------------------------------------------

def matmul(x, w):
    """``x @ w`` for ``x`` of shape (..., a) and a 2-D weight ``w`` of shape (a, b)."""
    if w.value.ndim != 2 or x.shape[-1:] != w.shape[:1]:
        raise ShapeError(f"matmul: shapes {x.shape} and {w.shape} are incompatible")
    xv, wv = x.value, w.value

    def vjp(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _emit(xv @ wv, (x, w), vjp)


def bias_add(x, b):
    if b.value.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: shapes {x.shape} and {b.shape} are incompatible")

    def vjp(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _emit(x.value + b.value, (x, b), vjp)


def add(a, b):
    _same_shape(a, b, "add")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(x, s):
    s = float(s)
    return _emit(x.value * s, (x,), lambda g: (g * s,))


def relu(x):
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.value)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    ax = axis % tensors[0].value.ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {tuple(other)} are incompatible")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    value = np.concatenate([t.value for t in tensors], axis=ax)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _emit(value, tuple(tensors), vjp)


def columns(x, start, stop):
    """Channel slice ``x[..., start:stop]``."""
    def vjp(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.value[..., start:stop], (x,), vjp)


def reshape(x, shape):
    old = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x):
    return _emit(np.asarray(x.value.sum()), (x,), lambda g: (np.full_like(x.value, g),))


def mean_squared_norm(x):
    """Mean over rows of the squared row norm; a 1-D input is one row."""
    v = x.value if x.value.ndim > 1 else x.value.reshape(1, -1)
    rows = v.reshape(-1, v.shape[-1]).shape[0]
    value = np.asarray(np.sum(v * v) / rows)
    return _emit(value, (x,), lambda g: (g * 2.0 * x.value / rows,))


def normalize_rows(x, eps=0.0):
    """Each row divided by its Euclidean norm."""
    norm = np.sqrt(np.sum(x.value * x.value, axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise InvalidArgumentError("normalize_rows: zero-norm row")
    y = x.value / norm

    def vjp(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm,)

    return _emit(y, (x,), vjp)


def gather_rows(x, idx):
    """``x[idx]`` along the first axis; gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        if NUMBA_ENABLED:
            return (_scatter_add_kernel(np.ascontiguousarray(g), idx, x.value.shape[0]),)
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.value[idx], (x,), vjp)


@njit
def _scatter_add_kernel(g, idx, n):
    out = np.zeros((n, g.shape[1]))
    for r in range(idx.shape[0]):
        dst = idx[r]
        for c in range(g.shape[1]):
            out[dst, c] += g[r, c]
    return out


@njit
def _segment_argmax_kernel(v, offsets):
    n_seg = offsets.shape[0] - 1
    m = v.shape[1]
    vmax = np.zeros((n_seg, m))
    arg = np.full((n_seg, m), -1, dtype=np.int64)
    for s in range(n_seg):
        lo, hi = offsets[s], offsets[s + 1]
        if hi <= lo:
            continue
        for c in range(m):
            vmax[s, c] = v[lo, c]
            arg[s, c] = lo
        for r in range(lo + 1, hi):
            for c in range(m):
                if v[r, c] > vmax[s, c]:
                    vmax[s, c] = v[r, c]
                    arg[s, c] = r
    return vmax, arg


def _segment_argmax(v, offsets):
    """Per nonempty segment and channel: max value and first row reaching it."""
    if NUMBA_ENABLED and v.ndim == 2 and v.shape[1] > 0:
        vmax, arg = _segment_argmax_kernel(np.ascontiguousarray(v), offsets)
        nonempty = np.diff(offsets) > 0
        return nonempty, vmax[nonempty], arg[nonempty]
    counts = np.diff(offsets)
    nonempty = counts > 0
    starts = offsets[:-1][nonempty]
    vmax = np.maximum.reduceat(v, starts, axis=0)
    seg_of_row = np.repeat(np.arange(len(starts)), counts[nonempty])
    hit = v == vmax[seg_of_row]
    rows = np.arange(v.shape[0])[:, None]
    cand = np.where(hit, rows, v.shape[0])
    arg = np.minimum.reduceat(cand, starts, axis=0)
    return nonempty, vmax, arg


def segment_max(x, offsets):
    """Channel-wise max over each row segment ``[offsets[s], offsets[s+1])``.

    Empty segments yield zeros and pass no gradient. The gradient of a channel
    goes to the first row attaining the max.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    v = x.value
    if v.ndim != 2:
        raise ShapeError(f"segment_max expects [rows, channels], got {v.shape}")
    if offsets[-1] != v.shape[0]:
        raise ShapeError(f"segment_max: offsets cover {offsets[-1]} rows, tensor has {v.shape[0]}")
    out = np.zeros((len(offsets) - 1, v.shape[1]))
    if v.shape[0] == 0:
        return _emit(out, (x,), lambda g: (None,))
    nonempty, vmax, arg = _segment_argmax(v, offsets)
    out[nonempty] = vmax
    chan = np.broadcast_to(np.arange(v.shape[1]), arg.shape)

    def vjp(g):
        full = np.zeros_like(v)
        full[arg, chan] = g[nonempty]
        return (full,)

    return _emit(out, (x,), vjp)


def max_pool_set(x):
    """Element-wise max over the point axis of a ``[points, channels]`` set."""
    if x.value.ndim != 2:
        raise ShapeError(f"max_pool_set expects [points, channels], got {x.shape}")
    if x.shape[0] == 0:
        raise EmptySetError("max pooling over an empty set")
    return reshape(segment_max(x, np.array([0, x.shape[0]])), (x.shape[1],))
