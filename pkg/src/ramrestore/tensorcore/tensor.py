"""Dense float64 tensors with a recorded graph for reverse-mode differentiation."""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteValue, NotScalarRoot, ShapeMismatch, UnrecordedNode

MAX_RANK = 4
LEAKY_SLOPE = 0.2

_ids = itertools.count()
_local = threading.local()


def is_recording():
    return getattr(_local, "recording", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{op} produced a non-finite value")


class Tensor:
    """A numpy float64 array plus the bookkeeping needed for backward.

    ``op``/``parents``/``backward_fn`` form the gradient record of a node; they
    are only populated when the node was produced while recording was enabled
    and at least one input required gradients.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "backward_fn", "id")

    def __init__(self, data, requires_grad=False, *, _check=True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if _check:
            _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self.backward_fn = None
        self.id = next(_ids)

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
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, _check=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return absolute(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, backward_fn):
    _check_finite(data, op)
    out = Tensor(data, _check=False)
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def absolute(a):
    a = as_tensor(a)
    # subgradient 0 at the kink
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * factor, "leaky_relu", (a,), lambda g: (g * factor,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape),)

    return _result(np.sum(a.data, axis=axes), "sum", (a,), backward)


def mean(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape),)

    return _result(np.mean(a.data, axis=axes), "mean", (a,), backward)


def add_bias(x, b):
    """Add a per-channel bias of shape (C,) to an NCHW tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} does not fit input {x.shape}")

    def backward(g):
        return g, g.sum(axis=(0, 2, 3)) if b.requires_grad else None

    return _result(x.data + b.data[None, :, None, None], "bias_add", (x, b), backward)


def reflect_pad(arr):
    return np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")


def _fold_reflect(gp):
    """Adjoint of a 1-pixel reflect pad on the last two axes."""
    rows = gp[:, :, 1:-1, :].copy()
    rows[:, :, 1, :] += gp[:, :, 0, :]
    rows[:, :, -2, :] += gp[:, :, -1, :]
    out = rows[:, :, :, 1:-1].copy()
    out[:, :, :, 1] += rows[:, :, :, 0]
    out[:, :, :, -2] += rows[:, :, :, -1]
    return out


def _im2col(x):
    """Patch matrix with rows (n, y, x) and columns ordered (dy, dx, c)."""
    n, c, h, w = x.shape
    padded = reflect_pad(x).transpose(0, 2, 3, 1)
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv2d(x, w):
    """3x3, stride-1 cross-correlation with reflect padding (no bias)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    if h < 2 or wd < 2:
        raise ShapeMismatch(f"conv2d: reflect padding needs H,W >= 2, got {(h, wd)}")
    out_c = w.shape[0]
    wmat = w.data.transpose(0, 2, 3, 1).reshape(out_c, 9 * c)
    cols = _im2col(x.data)
    out = (cols @ wmat.T).reshape(n, h, wd, out_c).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    saved = cols if w.requires_grad else None

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * wd, out_c)
        gw = None
        if w.requires_grad:
            gw = (gmat.T @ saved).reshape(out_c, 3, 3, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, h, wd, 3, 3, c)
            gp = np.zeros((n, h + 2, wd + 2, c))
            for dy in range(3):
                for dx in range(3):
                    gp[:, dy:dy + h, dx:dx + wd, :] += gcols[:, :, :, dy, dx, :]
            gx = _fold_reflect(gp.transpose(0, 3, 1, 2))
        return gx, gw

    return _result(out, "conv2d", (x, w), backward)


class Gradients(dict):
    """Mapping node id -> gradient Tensor; also accepts the Tensor itself as key."""

    def __getitem__(self, key):
        return super().__getitem__(key.id if isinstance(key, Tensor) else key)

    def __contains__(self, key):
        return super().__contains__(key.id if isinstance(key, Tensor) else key)

    def get(self, key, default=None):
        return super().get(key.id if isinstance(key, Tensor) else key, default)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(root, taps=()):
    """Reverse-mode sweep from a scalar ``root``.

    Returns gradients for every recorded leaf reachable from ``root``, for
    ``root`` itself and for every tensor in ``taps`` (zeros when a tap does
    not influence the root).
    """
    if root.size != 1:
        raise NotScalarRoot(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise UnrecordedNode("root was not produced by a recorded operation")
    for t in taps:
        if not t.requires_grad:
            raise UnrecordedNode(f"tapped tensor {t!r} is not part of a recorded graph")
    keep = {t.id for t in taps} | {root.id}
    order = _topo_order(root)
    grads = {root.id: np.ones(root.shape)}
    out = Gradients()
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.id in keep or node.is_leaf:
            out[node.id] = Tensor(g, _check=False)
        if node.is_leaf:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    for t in taps:
        if t.id not in out:
            out[t.id] = Tensor(np.zeros(t.shape), _check=False)
    return out


def grad(root, wrt):
    """Convenience: gradient of ``root`` w.r.t. a single tensor."""
    return backward(root, taps=(wrt,))[wrt]
