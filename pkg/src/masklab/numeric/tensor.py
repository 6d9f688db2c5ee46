"""Dense float tensors with reverse-mode automatic differentiation.

Each op computes its forward value eagerly with numpy and, when any input
requires a gradient and recording is enabled, links the output to its
inputs together with a closure mapping the output gradient to input
gradients. `Tensor.backward` orders the recorded graph into a `GradTape`
and replays it in reverse topological order.

Only scalar-with-tensor broadcasting is supported; every other elementwise
pairing must have identical shapes.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from scipy.special import expit

from ..errors import DimensionError, DomainError, NumericError, UsageError

LOG_FLOOR = 1e-8

_state = threading.local()
_node_ids = itertools.count()


def _tls():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.float32
        _state.recorded = 0
    return _state


def default_dtype():
    return _tls().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    st = _tls()
    prev = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def recorded_ops():
    """Number of graph nodes recorded on this thread so far."""
    return _tls().recorded


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype or default_dtype()
        self.data = np.array(data, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_node_ids)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False):
        return cls(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)

    @classmethod
    def full(cls, shape, value, requires_grad=False):
        return cls(np.full(shape, value, dtype=default_dtype()), requires_grad=requires_grad)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None):
        """Populate ``grad`` on every reachable leaf that requires it.

        Without an explicit seed the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() on a non-scalar tensor of shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError(f"seed gradient shape {seed.shape} != {self.shape}")
        GradTape.from_output(self).replay(seed)

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Recorded nodes reachable from one output, consumers before producers."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p._id not in seen:
                    stack.append((p, False))
        order.reverse()
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed):
        grads = {self.nodes[0]._id: seed} if self.nodes else {}
        for node in self.nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=parents[0].data.dtype if parents else default_dtype())
    out.grad = None
    out._id = next(_node_ids)
    out._op = op
    st = _tls()
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        st.recorded += 1
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        return _make(a.data - a.data.dtype.type(b), (a,), lambda g: (g,), "sub_scalar")
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        c = a.data.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        c = a.data.dtype.type(b)
        return _make(a.data / c, (a,), lambda g: (g / c,), "div_scalar")
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a):
    y = 1.0 / a.data
    return _make(y, (a,), lambda g: (-g * y * y,), "reciprocal")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def absolute(a):
    ad = a.data
    # sign(0) = 0: the subgradient at a kink is taken as zero
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def clip(a, lo, hi):
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- activations -----------------------------------------------------------------

def sigmoid(x):
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def relu(x):
    xd = x.data
    return _make(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    """Natural log with inputs clamped to at least ``LOG_FLOOR``."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("log of NaN")
    kept = xd >= LOG_FLOOR
    safe = np.maximum(xd, LOG_FLOOR)
    return _make(np.log(safe), (x,), lambda g: (g * kept / safe,), "log")


def softmax(x):
    """Softmax over the last axis."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


# -- reductions -------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce_sum(x, axis=None):
    axis = _norm_axis(axis, x.ndim)
    if x.size == 0:
        raise DomainError("sum over an empty tensor")
    xd = x.data
    out = np.sum(xd, axis=axis, dtype=np.float64)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape),)

    return _make(out, (x,), back, "sum")


def reduce_mean(x, axis=None):
    axis = _norm_axis(axis, x.ndim)
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise DomainError("mean over an empty tensor")
    xd = x.data
    n = xd.size if axis is None else xd.shape[axis]
    out = np.mean(xd, axis=axis, dtype=np.float64)

    def back(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, xd.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape),)

    return _make(out, (x,), back, "mean")


def reduce_max(x, axis=None):
    """Max reduction; the backward pass routes to the first argmax."""
    axis = _norm_axis(axis, x.ndim)
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise DomainError("max over an empty tensor")
    xd = x.data
    if axis is None:
        flat = int(np.argmax(xd))
        out = xd.reshape(-1)[flat]

        def back(g):
            gx = np.zeros(xd.size, dtype=xd.dtype)
            gx[flat] = g
            return (gx.reshape(xd.shape),)

        return _make(out, (x,), back, "max")

    idx = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), back, "max")


# -- shape and indexing --------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = x.data.shape
    return _make(y, (x,), lambda g: (g.reshape(src),), "reshape")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)


def index(x, idx):
    xd = x.data
    y = xd[idx]
    basic = _is_basic(idx)

    def back(g):
        gx = np.zeros_like(xd)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(y, (x,), back, "index")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DomainError("concat of no tensors")
    axis = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {t.shape} and {tensors[0].shape}")
    sizes = [t.shape[axis] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(y, tuple(tensors), back, "concat")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- convolution -----------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({f},)")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise UsageError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * p, wd + 2 * p
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1

    xd = x.data
    # channel-major columns [C*kh*kw, N*Ho*Wo]; the scatter in backward then
    # writes contiguous row blocks
    xc = xd.transpose(1, 0, 2, 3)
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
    if kh == kw == 1 and s == 1:
        cols = np.ascontiguousarray(xc).reshape(c, n * ho * wo)
    else:
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xc[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
    wflat = w.data.reshape(f, -1)
    out = wflat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gf @ cols.T).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            gb = gf.sum(axis=1, dtype=np.float64)
        if x.requires_grad:
            gcols = (wflat.T @ gf).reshape(c, kh, kw, n, ho, wo)
            if kh == kw == 1 and s == 1:
                gxp = gcols.reshape(c, n, hp, wp)
            else:
                gxp = np.zeros((c, n, hp, wp), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, i, j]
            gx = gxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")
