"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds its output eagerly and, when any input requires a gradient
and grad mode is on, links the output to its inputs through a ``Node``. The
linked nodes form the tape: ``build_tape`` lays them out in topological
order and ``backward`` walks that order in reverse.

Non-differentiable kinks (relu at 0, |x| at 0, hinge at 0, ties in ``min``)
take subgradient 0 (ties in ``min`` route to the first minimum).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_uid = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass
class Node:
    kind: str
    parents: tuple
    backward: Callable[[np.ndarray], tuple]
    attrs: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "uid", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.uid = next(_uid)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, float(o))
        return mul(self, o)

    def __rmul__(self, o):
        return self.__mul__(o)

    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, 1.0 / float(o))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, out: np.ndarray, inputs: Sequence[Tensor]) -> None:
    if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise FloatingPointError(f"{kind}: non-finite output from finite inputs")


def _make(kind: str, out: np.ndarray, parents: Sequence[Tensor], backward, **attrs) -> Tensor:
    _check_finite(kind, out, parents)
    t = Tensor.__new__(Tensor)
    t.data = out if out.dtype == np.float64 else out.astype(np.float64)
    t.grad = None
    t.uid = next(_uid)
    t.name = None
    t._node = None
    t.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._node = Node(kind, tuple(parents), backward, attrs)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,), factor=c)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def grl(x, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    if not lam > 0:
        raise ValueError(f"grl: lambda must be > 0, got {lam}")
    x = as_tensor(x)
    lam = float(lam)
    return _make("grl", x.data.copy(), (x,), lambda g: (g * -lam,), lam=lam)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw, axis=axis)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([shape[a] for a in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,), bw, axis=axis)


def min_(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("min", out, (x,), bw, axis=axis)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),), shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), axes=tuple(axes))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)

    def bw(g):
        gx = np.zeros(shape)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make("getitem", np.array(x.data[idx]), (x,), bw)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from None
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), axis=axis)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), bw)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _windows(xp, kh, kw, sh, sw):
    # (N, C, Ho, Wo, kh, kw) strided view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph:ph + H, pw:pw + W] = x
    return xp


def _conv2d_forward(x, w, stride, pad):
    sh, sw = stride
    ph, pw = pad
    kh, kw = w.shape[2:]
    win = _windows(_pad(x, ph, pw), kh, kw, sh, sw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_direct(x, w, stride, pad):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = _pad(x, ph, pw)
    Ho, Wo = _conv_out(H, kh, sh, ph), _conv_out(W, kw, sw, pw)
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    out[n, o, i, j] = np.sum(patch * w[o])
    return out


def _conv2d_input_grad(g, w, x_shape, stride, pad):
    """Scatter ``g`` (N, O, Ho, Wo) back through weights (O, C, kh, kw)."""
    N, C, H, W = x_shape
    sh, sw = stride
    ph, pw = pad
    kh, kw = w.shape[2:]
    Ho, Wo = g.shape[2:]
    cols = np.tensordot(w, g, axes=([0], [1]))  # C, kh, kw, N, Ho, Wo
    gxp = np.zeros((C, N, H + 2 * ph + sh, W + 2 * pw + sw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += cols[:, i, j]
    return gxp[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3)


def _conv2d_weight_grad(g, x, w_shape, stride, pad):
    sh, sw = stride
    ph, pw = pad
    kh, kw = w_shape[2:]
    win = _windows(_pad(x, ph, pw), kh, kw, sh, sw)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw


def conv2d(x, w, b=None, stride=1, pad=0, method: str = "im2col") -> Tensor:
    """Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw).

    ``method="direct"`` runs the naive sliding-window loop; ``"im2col"`` the
    strided-view contraction. Both agree to rounding.
    """
    x, w = as_tensor(x), as_tensor(w)
    stride, pad = _pair(stride), _pair(pad)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    if x.shape[2] + 2 * pad[0] < w.shape[2] or x.shape[3] + 2 * pad[1] < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if method == "im2col":
        out = _conv2d_forward(x.data, w.data, stride, pad)
    elif method == "direct":
        out = _conv2d_direct(x.data, w.data, stride, pad)
    else:
        raise ValueError(f"conv2d: unknown method {method!r}")
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    xd, wd = x.data, w.data

    def bw(g):
        grads = (_conv2d_input_grad(g, wd, xd.shape, stride, pad),
                 _conv2d_weight_grad(g, xd, wd.shape, stride, pad))
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make("conv2d", out, parents, bw, stride=stride, pad=pad)


def conv_transpose2d(x, w, b=None, stride=1, pad=0, output_padding=0) -> Tensor:
    """Transposed convolution of x (N, Cin, H, W) with w (Cin, Cout, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    stride, pad, opad = _pair(stride), _pair(pad), _pair(output_padding)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: incompatible input {x.shape} and kernel {w.shape}")
    N, _, H, W = x.shape
    kh, kw = w.shape[2:]
    Ho = (H - 1) * stride[0] - 2 * pad[0] + kh + opad[0]
    Wo = (W - 1) * stride[1] - 2 * pad[1] + kw + opad[1]
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}, kernel {w.shape}")
    out_shape = (N, w.shape[1], Ho, Wo)
    out = _conv2d_input_grad(x.data, w.data, out_shape, stride, pad)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias {b.shape} does not match kernel {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    xd, wd = x.data, w.data

    def bw(g):
        gx = _conv2d_forward(g, wd, stride, pad)[:, :, :H, :W]
        gw = _conv2d_weight_grad(xd, g, wd.shape, stride, pad)
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make("conv_transpose2d", np.ascontiguousarray(out), parents, bw,
                 stride=stride, pad=pad, output_padding=opad)


# ---------------------------------------------------------------- nn-flavoured ops

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), bw, axis=axis)


def l1_distance(a, b, reduction: str = "mean") -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sgn = np.sign(diff)
    if reduction == "mean":
        n = diff.size
        return _make("l1_distance", np.array(np.abs(diff).mean()), (a, b),
                     lambda g: (g * sgn / n, -g * sgn / n), reduction=reduction)
    if reduction == "sum":
        return _make("l1_distance", np.array(np.abs(diff).sum()), (a, b),
                     lambda g: (g * sgn, -g * sgn), reduction=reduction)
    raise ValueError(f"l1_distance: unknown reduction {reduction!r}")


def sq_l2_distance(a, b, axis: int = -1) -> Tensor:
    """Sum over ``axis`` of (a - b)**2, broadcasting a against b."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sq_l2_distance", a, b)
    diff = a.data - b.data
    out = np.sum(diff * diff, axis=axis)
    sa, sb = a.shape, b.shape

    def bw(g):
        gd = 2.0 * diff * np.expand_dims(g, axis)
        return _unbroadcast(gd, sa), -_unbroadcast(gd, sb)

    return _make("sq_l2_distance", out, (a, b), bw, axis=axis)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    active = norm > eps

    def bw(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return _make("l2_normalize", y, (x,), bw, axis=axis, eps=eps)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, C) against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _make("cross_entropy", np.array(loss), (logits,), bw)


def spatial_mul(f, am) -> Tensor:
    """Scale feature map f (N, D, H, W) position-wise by am (N, H, W)."""
    f, am = as_tensor(f), as_tensor(am)
    if f.ndim != 4 or am.shape != (f.shape[0],) + f.shape[2:]:
        raise ShapeError(f"spatial_mul: features {f.shape} vs map {am.shape}")
    fd, ad = f.data, am.data
    return _make("spatial_mul", fd * ad[:, None], (f, am),
                 lambda g: (g * ad[:, None], np.sum(g * fd, axis=1)))


# ---------------------------------------------------------------- dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "exp": exp,
    "grl": grl, "sum": sum_, "mean": mean, "min": min_, "reshape": reshape,
    "transpose": transpose, "matmul": matmul, "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d, "softmax": softmax,
    "l1_distance": l1_distance, "sq_l2_distance": sq_l2_distance,
    "l2_normalize": l2_normalize, "cross_entropy": cross_entropy,
    "spatial_mul": spatial_mul,
}


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------- backward

@dataclass(frozen=True)
class TapeEntry:
    kind: str
    input_ids: tuple
    output_id: int
    attrs: dict


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if t.uid in seen:
            continue
        seen.add(t.uid)
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.uid not in seen:
                    stack.append((p, False))
    return order


def build_tape(loss: Tensor) -> list[TapeEntry]:
    """Recorded ops reachable from ``loss`` in topological order."""
    return [TapeEntry(t._node.kind, tuple(p.uid for p in t._node.parents), t.uid, dict(t._node.attrs))
            for t in _topo(loss) if t._node is not None]


def backward(loss: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Returns the gradients computed by this call, keyed by leaf tensor.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor requiring grad")
    order = _topo(loss)
    grads = {loss.uid: np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(t.uid, None)
        if g is None:
            continue
        if t._node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
                result[t] = result[t] + g if t in result else g
            continue
        for p, gp in zip(t._node.parents, t._node.backward(g)):
            if not p.requires_grad or gp is None:
                continue
            grads[p.uid] = grads[p.uid] + gp if p.uid in grads else gp
    if not retain_graph:
        for t in order:
            if t._node is not None:
                t._node = None
                t.requires_grad = False
    return result


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    kink: bool = False
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None


def gradient_check(f: Callable[[Tensor], Tensor], point, tol: float = 1e-4,
                   step: float = 1e-5, kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` with central differences.

    The error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    (scale-relative, so near-zero components do not blow up). A coordinate
    whose one-sided slopes disagree by more than ``kink_tol`` is reported as a
    kink and fails the check.
    """
    x0 = np.array(as_tensor(point).data, dtype=np.float64)

    def value(arr):
        with no_grad():
            v = f(Tensor(arr))
        return v.item()

    f0 = value(x0)
    if not np.isfinite(f0):
        raise ValueError("gradient_check: f is not finite at the point")
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ValueError(f"gradient_check: f must be scalar, got shape {out.shape}")
    analytic = backward(out)[x] if out.requires_grad else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    kink = False
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp, fm = value(xp.reshape(x0.shape)), value(xm.reshape(x0.shape))
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            kink = True
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = float(np.abs(analytic - numeric).max(initial=0.0) / scale_) if scale_ > 0 else 0.0
    return GradCheckReport(err, (err <= tol) and not kink, kink, analytic, numeric)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params],
                   0, beta1, beta2, eps)


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float) -> list[Tensor]:
    """One bias-corrected Adam update; ``grads`` maps each param to its gradient."""
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("adam_step: state does not match parameters")
    gs = []
    for p in params:
        g = grads.get(p) if hasattr(grads, "get") else None
        if g is None:
            raise ValueError(f"adam_step: missing gradient for parameter {p.name or p.uid}")
        gs.append(g)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, gs)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return list(params)
