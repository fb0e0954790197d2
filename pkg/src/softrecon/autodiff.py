"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable quantity in the renderer, the encoders and the losses is
carried by a :class:`Tensor`. Applying an op records a node on an implicit
tape (the graph of ``parents`` links); :func:`backward` walks the recorded
graph once, in reverse creation order, accumulating gradients additively.

Determinism notes: reductions use numpy's fixed pairwise order, indexed
accumulation uses ``np.add.at`` (sequential in index order), and the backward
visit order is fixed by node creation order, so replaying the same
computation yields bit-identical values and gradients.

Subgradient conventions at kinks: ``relu`` and ``abs`` use 0 at the origin,
``clamp`` uses 0 on and outside its bounds, ``maximum``/``minimum`` send the
gradient to their first argument on ties.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "apply",
    "backward",
    "grad_check",
    "GradCheckReport",
    "default_dtype",
    "precision",
    "constant",
    "parameter",
    "stack",
    "op_names",
]


class ShapeError(ValueError):
    """Input shapes incompatible with an op's shape rule."""


_DTYPE = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_counter = itertools.count()


def default_dtype():
    return _default_dtype


@contextmanager
def precision(name):
    """Temporarily switch the default float width ('float32' or 'float64').

    Gradient-check runs want float64 headroom; training runs in float32.
    """
    global _default_dtype
    if name not in _DTYPE:
        raise ValueError(f"unknown precision {name!r}")
    prev = _default_dtype
    _default_dtype = _DTYPE[name]
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A node on the tape: value, gradient slot and recorded parents."""

    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "is_param",
                 "_backward", "_id")

    def __init__(self, data, requires_grad=False, is_param=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.op = None
        self.parents = ()
        self.requires_grad = requires_grad or is_param
        self.is_param = is_param
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    # -- convenience wrappers over apply() ---------------------------------

    def __add__(self, other):
        return apply("add", [self, _lift(other, self.dtype)])

    def __radd__(self, other):
        return apply("add", [_lift(other, self.dtype), self])

    def __sub__(self, other):
        return apply("sub", [self, _lift(other, self.dtype)])

    def __rsub__(self, other):
        return apply("sub", [_lift(other, self.dtype), self])

    def __mul__(self, other):
        return apply("mul", [self, _lift(other, self.dtype)])

    def __rmul__(self, other):
        return apply("mul", [_lift(other, self.dtype), self])

    def __truediv__(self, other):
        return apply("div", [self, _lift(other, self.dtype)])

    def __rtruediv__(self, other):
        return apply("div", [_lift(other, self.dtype), self])

    def __neg__(self):
        return apply("negate", [self])

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    def __getitem__(self, key):
        return apply("slice", [self], key=key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=shape)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def relu(self):
        return apply("relu", [self])

    def tanh(self):
        return apply("tanh", [self])

    def sigmoid(self):
        return apply("sigmoid", [self])

    def exp(self):
        return apply("exp", [self])

    def log(self):
        return apply("log", [self])

    def sqrt(self):
        return apply("sqrt", [self])

    def sin(self):
        return apply("sin", [self])

    def cos(self):
        return apply("cos", [self])

    def abs(self):
        return apply("abs", [self])

    def clamp(self, lo, hi):
        return apply("clamp", [self], lo=lo, hi=hi)

    def broadcast_to(self, shape):
        return apply("broadcast", [self], shape=tuple(shape))

    def transpose(self, axes=None):
        return apply("transpose", [self], axes=axes)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, param={self.is_param})"


def constant(data, dtype=None):
    """A leaf carrying data that never receives gradient."""
    arr = np.asarray(data, dtype=dtype or _default_dtype)
    return Tensor(arr)


def parameter(data, dtype=None):
    """A leaf marked as trainable; backward() fills its .grad."""
    arr = np.asarray(data, dtype=dtype or _default_dtype)
    return Tensor(arr, is_param=True)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum grad over the axes numpy broadcasting expanded to reach shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Op registry: name -> (forward, backward). forward(datas, attrs) -> ndarray;
# backward(grad_out, datas, out_data, attrs) -> tuple of per-parent grads
# (None for a parent that takes no gradient).
# ---------------------------------------------------------------------------

_OPS = {}


def _op(name):
    # each op body is a factory returning its (forward, backward) pair
    def register(factory):
        _OPS[name] = factory()
        return factory
    return register


def op_names():
    return sorted(_OPS)


def _binary_shapes(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


@_op("add")
def _():
    def fwd(ds, at):
        _binary_shapes("add", *ds)
        return ds[0] + ds[1]

    def bwd(g, ds, out, at):
        return (_unbroadcast(g, ds[0].shape), _unbroadcast(g, ds[1].shape))
    return fwd, bwd


@_op("sub")
def _():
    def fwd(ds, at):
        _binary_shapes("sub", *ds)
        return ds[0] - ds[1]

    def bwd(g, ds, out, at):
        return (_unbroadcast(g, ds[0].shape), _unbroadcast(-g, ds[1].shape))
    return fwd, bwd


@_op("mul")
def _():
    def fwd(ds, at):
        _binary_shapes("mul", *ds)
        return ds[0] * ds[1]

    def bwd(g, ds, out, at):
        return (_unbroadcast(g * ds[1], ds[0].shape),
                _unbroadcast(g * ds[0], ds[1].shape))
    return fwd, bwd


@_op("div")
def _():
    def fwd(ds, at):
        _binary_shapes("div", *ds)
        return ds[0] / ds[1]

    def bwd(g, ds, out, at):
        return (_unbroadcast(g / ds[1], ds[0].shape),
                _unbroadcast(-g * ds[0] / (ds[1] * ds[1]), ds[1].shape))
    return fwd, bwd


@_op("negate")
def _():
    return (lambda ds, at: -ds[0]), (lambda g, ds, out, at: (-g,))


@_op("maximum")
def _():
    def fwd(ds, at):
        _binary_shapes("maximum", *ds)
        return np.maximum(ds[0], ds[1])

    def bwd(g, ds, out, at):
        take_a = ds[0] >= ds[1]
        return (_unbroadcast(np.where(take_a, g, 0), ds[0].shape),
                _unbroadcast(np.where(take_a, 0, g), ds[1].shape))
    return fwd, bwd


@_op("minimum")
def _():
    def fwd(ds, at):
        _binary_shapes("minimum", *ds)
        return np.minimum(ds[0], ds[1])

    def bwd(g, ds, out, at):
        take_a = ds[0] <= ds[1]
        return (_unbroadcast(np.where(take_a, g, 0), ds[0].shape),
                _unbroadcast(np.where(take_a, 0, g), ds[1].shape))
    return fwd, bwd


@_op("matmul")
def _():
    def fwd(ds, at):
        a, b = ds
        if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
        return a @ b

    def bwd(g, ds, out, at):
        a, b = ds
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
    return fwd, bwd


@_op("relu")
def _():
    def fwd(ds, at):
        return np.maximum(ds[0], 0)

    def bwd(g, ds, out, at):
        return (np.where(ds[0] > 0, g, 0),)
    return fwd, bwd


@_op("tanh")
def _():
    def fwd(ds, at):
        return np.tanh(ds[0])

    def bwd(g, ds, out, at):
        return (g * (1 - out * out),)
    return fwd, bwd


@_op("sigmoid")
def _():
    def fwd(ds, at):
        x = ds[0]
        # evaluate in the stable half for either sign
        pos = x >= 0
        z = np.exp(np.where(pos, -x, x))
        return np.where(pos, 1 / (1 + z), z / (1 + z)).astype(x.dtype)

    def bwd(g, ds, out, at):
        return (g * out * (1 - out),)
    return fwd, bwd


@_op("exp")
def _():
    def fwd(ds, at):
        return np.exp(ds[0])

    def bwd(g, ds, out, at):
        return (g * out,)
    return fwd, bwd


@_op("log")
def _():
    def fwd(ds, at):
        return np.log(ds[0])

    def bwd(g, ds, out, at):
        return (g / ds[0],)
    return fwd, bwd


@_op("sqrt")
def _():
    def fwd(ds, at):
        return np.sqrt(ds[0])

    def bwd(g, ds, out, at):
        return (g * 0.5 / out,)
    return fwd, bwd


@_op("sin")
def _():
    def fwd(ds, at):
        return np.sin(ds[0])

    def bwd(g, ds, out, at):
        return (g * np.cos(ds[0]),)
    return fwd, bwd


@_op("cos")
def _():
    def fwd(ds, at):
        return np.cos(ds[0])

    def bwd(g, ds, out, at):
        return (-g * np.sin(ds[0]),)
    return fwd, bwd


@_op("abs")
def _():
    def fwd(ds, at):
        return np.abs(ds[0])

    def bwd(g, ds, out, at):
        return (g * np.sign(ds[0]),)
    return fwd, bwd


@_op("clamp")
def _():
    def fwd(ds, at):
        return np.clip(ds[0], at["lo"], at["hi"])

    def bwd(g, ds, out, at):
        inside = (ds[0] > at["lo"]) & (ds[0] < at["hi"])
        return (np.where(inside, g, 0),)
    return fwd, bwd


@_op("sum")
def _():
    def fwd(ds, at):
        return np.sum(ds[0], axis=at["axis"], keepdims=at["keepdims"])

    def bwd(g, ds, out, at):
        x = ds[0]
        if at["axis"] is not None and not at["keepdims"]:
            g = np.expand_dims(g, at["axis"])
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
    return fwd, bwd


@_op("mean")
def _():
    def fwd(ds, at):
        return np.mean(ds[0], axis=at["axis"], keepdims=at["keepdims"])

    def bwd(g, ds, out, at):
        x = ds[0]
        n = x.size if at["axis"] is None else np.prod(
            [x.shape[a] for a in np.atleast_1d(at["axis"])])
        if at["axis"] is not None and not at["keepdims"]:
            g = np.expand_dims(g, at["axis"])
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype, copy=False),)
    return fwd, bwd


@_op("broadcast")
def _():
    def fwd(ds, at):
        try:
            return np.broadcast_to(ds[0], at["shape"]).copy()
        except ValueError:
            raise ShapeError(f"broadcast: {ds[0].shape} to {at['shape']}")

    def bwd(g, ds, out, at):
        return (_unbroadcast(g, ds[0].shape),)
    return fwd, bwd


@_op("reshape")
def _():
    def fwd(ds, at):
        try:
            return ds[0].reshape(at["shape"])
        except ValueError:
            raise ShapeError(f"reshape: {ds[0].shape} to {at['shape']}")

    def bwd(g, ds, out, at):
        return (g.reshape(ds[0].shape),)
    return fwd, bwd


@_op("transpose")
def _():
    def fwd(ds, at):
        return np.transpose(ds[0], at["axes"])

    def bwd(g, ds, out, at):
        axes = at["axes"]
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)
    return fwd, bwd


@_op("concat")
def _():
    def fwd(ds, at):
        base = [d.shape[:at["axis"]] + d.shape[at["axis"] + 1:] for d in ds]
        if len(set(base)) > 1:
            raise ShapeError(f"concat: incompatible shapes {[d.shape for d in ds]}")
        return np.concatenate(ds, axis=at["axis"])

    def bwd(g, ds, out, at):
        sizes = [d.shape[at["axis"]] for d in ds]
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=at["axis"]))
    return fwd, bwd


@_op("slice")
def _():
    def fwd(ds, at):
        return ds[0][at["key"]].copy()

    def bwd(g, ds, out, at):
        gx = np.zeros_like(ds[0])
        gx[at["key"]] = g
        return (gx,)
    return fwd, bwd


@_op("take")
def _():
    # integer-array gather along axis 0; backward scatter-adds in index order
    def fwd(ds, at):
        idx = at["idx"]
        if idx.min() < 0 or idx.max() >= ds[0].shape[0]:
            raise ShapeError(f"take: index out of range for axis size {ds[0].shape[0]}")
        return ds[0][idx]

    def bwd(g, ds, out, at):
        gx = np.zeros_like(ds[0])
        np.add.at(gx, at["idx"], g)
        return (gx,)
    return fwd, bwd


@_op("scatter_add")
def _():
    # values (K, ...) summed into rows of a zero (size, ...) output
    def fwd(ds, at):
        idx = at["idx"]
        if idx.shape[0] != ds[0].shape[0]:
            raise ShapeError("scatter_add: index count != value count")
        out = np.zeros((at["size"],) + ds[0].shape[1:], dtype=ds[0].dtype)
        np.add.at(out, idx, ds[0])
        return out

    def bwd(g, ds, out, at):
        return (g[at["idx"]],)
    return fwd, bwd


@_op("softmax_cross_entropy")
def _():
    # logits (K, V), integer labels (K,) -> per-row loss (K,)
    def fwd(ds, at):
        logits = ds[0]
        if logits.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        return lse - logits[np.arange(logits.shape[0]), at["labels"]]

    def bwd(g, ds, out, at):
        logits = ds[0]
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(logits.shape[0]), at["labels"]] -= 1
        return (p * g[:, None],)
    return fwd, bwd


@_op("conv2d")
def _():
    # x (B,H,W,Cin) * w (kh,kw,Cin,Cout), zero padding, square stride
    def _cols(x, kh, kw, stride, padding):
        if padding:
            x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
        win = win[:, ::stride, ::stride]          # (B, Ho, Wo, Cin, kh, kw)
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)), x.shape

    def fwd(ds, at):
        x, w = ds
        kh, kw, cin, cout = w.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
        cols, _ = _cols(x, kh, kw, at["stride"], at["padding"])
        b, ho, wo = cols.shape[:3]
        out = cols.reshape(b * ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
        return out.reshape(b, ho, wo, cout)

    def bwd(g, ds, out, at):
        x, w = ds
        kh, kw, cin, cout = w.shape
        stride, padding = at["stride"], at["padding"]
        cols, padded_shape = _cols(x, kh, kw, stride, padding)
        b, ho, wo = cols.shape[:3]
        gflat = g.reshape(b * ho * wo, cout)
        gw = cols.reshape(b * ho * wo, kh * kw * cin).T @ gflat
        gcols = (gflat @ w.reshape(kh * kw * cin, cout).T).reshape(b, ho, wo, kh, kw, cin)
        gx = np.zeros(padded_shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += gcols[:, :, :, i, j]
        if padding:
            gx = gx[:, padding:-padding, padding:-padding]
        return (gx, gw.reshape(w.shape))
    return fwd, bwd


@_op("grid_sample")
def _():
    # bilinear sampling; (-1,-1) is the top-left pixel center, (1,1) the
    # bottom-right pixel center; out-of-range coords clamp to the border.
    # map (H,W,C) with coords (K,2), or map (B,H,W,C) with coords (K,2) plus
    # integer bidx (K,) selecting the batch entry per sample point.
    def _locate(ds, at):
        m, c = ds
        if c.ndim != 2 or c.shape[1] != 2:
            raise ShapeError(f"grid_sample: coords must be (K,2), got {c.shape}")
        if m.ndim == 3:
            h, w = m.shape[:2]
            flat = m.reshape(h * w, m.shape[2])
            base = np.zeros(c.shape[0], dtype=np.int64)
        elif m.ndim == 4:
            h, w = m.shape[1:3]
            flat = m.reshape(m.shape[0] * h * w, m.shape[3])
            bidx = at.get("bidx")
            if bidx is None:
                raise ShapeError("grid_sample: batched map needs bidx")
            base = bidx.astype(np.int64) * (h * w)
        else:
            raise ShapeError(f"grid_sample: map must be 3-d or 4-d, got {m.shape}")
        px = np.clip((c[:, 0] + 1) * 0.5 * (w - 1), 0, w - 1)
        py = np.clip((c[:, 1] + 1) * 0.5 * (h - 1), 0, h - 1)
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (px - x0).astype(m.dtype)[:, None]
        fy = (py - y0).astype(m.dtype)[:, None]
        idx = (base + y0 * w + x0, base + y0 * w + x1,
               base + y1 * w + x0, base + y1 * w + x1)
        return flat, idx, fx, fy, (h, w, px, py)

    def fwd(ds, at):
        flat, (i00, i01, i10, i11), fx, fy, _ = _locate(ds, at)
        top = flat[i00] * (1 - fx) + flat[i01] * fx
        bot = flat[i10] * (1 - fx) + flat[i11] * fx
        return top * (1 - fy) + bot * fy

    def bwd(g, ds, out, at):
        m, c = ds
        flat, (i00, i01, i10, i11), fx, fy, (h, w, px, py) = _locate(ds, at)
        gm = np.zeros_like(flat)
        np.add.at(gm, i00, g * (1 - fx) * (1 - fy))
        np.add.at(gm, i01, g * fx * (1 - fy))
        np.add.at(gm, i10, g * (1 - fx) * fy)
        np.add.at(gm, i11, g * fx * fy)
        # gradient w.r.t. coords; zero where clamped to the border
        dpx = ((flat[i01] - flat[i00]) * (1 - fy) + (flat[i11] - flat[i10]) * fy)
        dpy = ((flat[i10] - flat[i00]) * (1 - fx) + (flat[i11] - flat[i01]) * fx)
        live_x = ((px > 0) & (px < w - 1)).astype(m.dtype)
        live_y = ((py > 0) & (py < h - 1)).astype(m.dtype)
        gx = (g * dpx).sum(axis=1) * 0.5 * (w - 1) * live_x
        gy = (g * dpy).sum(axis=1) * 0.5 * (h - 1) * live_y
        return (gm.reshape(m.shape), np.stack([gx, gy], axis=1).astype(c.dtype))
    return fwd, bwd


def apply(kind, inputs, **attrs):
    """Record one op on the tape and return its eagerly computed output."""
    if kind not in _OPS:
        raise KeyError(f"unknown op kind {kind!r}")
    fwd, bwd = _OPS[kind]
    datas = [t.data for t in inputs]
    out_data = fwd(datas, attrs)
    out = Tensor(out_data)
    out.op = kind
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.parents = tuple(inputs)
        out._backward = lambda g: bwd(g, datas, out.data, attrs)
    return out


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad over the recorded graph.

    root must be scalar. Visits each reachable node exactly once, in reverse
    creation order (a valid reverse-topological order since parents are
    always created before children).
    """
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t.parents:
            if p.requires_grad and p._id not in nodes:
                stack_.append(p)
    root.grad = np.ones_like(root.data)
    for _id in sorted(nodes, reverse=True):
        t = nodes[_id]
        if t._backward is None or t.grad is None:
            continue
        for parent, g in zip(t.parents, t._backward(t.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# -- helpers ----------------------------------------------------------------

def stack(tensors, axis=0):
    """Stack along a new axis (reshape + concat composition)."""
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(t.reshape(tuple(shape)))
    return apply("concat", expanded, axis=axis)


def take(t, idx):
    return apply("take", [t], idx=np.asarray(idx, dtype=np.int64))


def scatter_add(t, idx, size):
    return apply("scatter_add", [t], idx=np.asarray(idx, dtype=np.int64), size=int(size))


def grid_sample(m, coords, bidx=None):
    if bidx is not None:
        bidx = np.asarray(bidx, dtype=np.int64)
    return apply("grid_sample", [m, coords], bidx=bidx)


def softplus(x):
    """log(1 + exp(x)), composed stably from primitive ops."""
    return x.relu() + ((-x.abs()).exp() + 1.0).log()


def log_sigmoid(x):
    """log(sigmoid(x)) = -softplus(-x), stable for large |x|."""
    return -softplus(-x)


# -- gradient checking -------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_coord: tuple
    analytic: float
    numeric: float
    nonfinite_coords: list = field(default_factory=list)


@dataclass
class GradCheckReport:
    params: list
    eps: float

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def nonfinite(self):
        return [(p.name, c) for p in self.params for c in p.nonfinite_coords]

    def summary(self):
        lines = [f"grad check (eps={self.eps:g}): max rel error {self.max_rel_error:.3e}"]
        for p in self.params:
            lines.append(f"  {p.name:24s} max_rel={p.max_rel_error:.3e} "
                         f"at {p.worst_coord} analytic={p.analytic:.6g} numeric={p.numeric:.6g}")
            for c in p.nonfinite_coords:
                lines.append(f"  {p.name:24s} NON-FINITE at {c}")
        return "\n".join(lines)


def grad_check(f, params, eps=None):
    """Compare analytic gradients of scalar f() against central differences.

    params maps names to parameter Tensors that f reads. Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    Non-finite evaluations are flagged with the coordinate that produced them.
    """
    for t in params.values():
        t.zero_grad()
    out = f()
    if eps is None:
        eps = 1e-3 if out.dtype == np.float32 else 1e-5
    backward(out)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}
    results = []
    for name, t in params.items():
        base = t.data.copy()
        max_rel, worst, worst_a, worst_n = 0.0, (), 0.0, 0.0
        bad = []
        for coord in np.ndindex(*t.data.shape or (1,)):
            c = coord if t.data.shape else ()
            t.data[c] = base[c] + eps
            hi = float(f().data)
            t.data[c] = base[c] - eps
            lo = float(f().data)
            t.data[c] = base[c]
            if not (np.isfinite(hi) and np.isfinite(lo)):
                bad.append(c)
                continue
            num = (hi - lo) / (2 * eps)
            ana = float(analytic[name][c])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            if rel > max_rel:
                max_rel, worst, worst_a, worst_n = rel, c, ana, num
        results.append(ParamCheck(name, max_rel, worst, worst_a, worst_n, bad))
    return GradCheckReport(results, eps)
