"""Minimal reverse-mode automatic differentiation over numpy arrays.

Images and feature maps use the NHWC layout throughout.  Every op builds a
new :class:`Tensor` whose ``_backward`` closure maps the output gradient to
one gradient per parent; :func:`backprop` walks the graph in reverse
creation order (a valid topological order, since a node is always created
after its parents) and sums gradients at fan-in nodes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation

_ids = itertools.count()
_DTYPES = {"train": np.float32, "test": np.float64}
_default_dtype = np.float32


def set_precision(mode: str) -> None:
    """Select the float width for newly created tensors: ``"train"`` (32-bit) or ``"test"`` (64-bit)."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ContractViolation(f"unknown precision mode {mode!r}")
    _default_dtype = _DTYPES[mode]


def get_dtype():
    return _default_dtype


@contextmanager
def precision(mode: str):
    global _default_dtype
    prev = _default_dtype
    set_precision(mode)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """Dense float array that records how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "__weakref__")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def detach(self):
        return detach(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)


def parameter(data, name=None, dtype=None) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _default_dtype))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_default_dtype)
    return Tensor(arr)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _pair(a, b):
    # plain numbers and arrays adopt the tensor operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ContractViolation("power supports scalar exponents only")
    x = a.data
    p = float(exponent)
    return _node(x ** p, (a,), lambda g: (g * p * x ** (p - 1.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= a.data >= lo
    if hi is not None:
        keep &= a.data <= hi
    return _node(out, (a,), lambda g: (g * keep,))


def detach(a) -> Tensor:
    """Value of ``a`` with no gradient path back to it."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _node(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def slice_(a, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _node(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        out = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def pad(a, width: int, mode: str = "edge") -> Tensor:
    """Pad the two spatial axes of an NHWC tensor by ``width`` on every side."""
    a = as_tensor(a)
    if width == 0:
        return a
    H, W = a.shape[1], a.shape[2]
    spec = ((0, 0), (width, width), (width, width), (0, 0))
    out = np.pad(a.data, spec, mode=mode)

    def backward(g):
        if mode == "constant":
            return (g[:, width:width + H, width:width + W, :],)
        # fold the replicated border back onto the edge rows/cols
        g = g.copy()
        g[:, width, :, :] += g[:, :width, :, :].sum(axis=1)
        g[:, width + H - 1, :, :] += g[:, width + H:, :, :].sum(axis=1)
        g[:, :, width, :] += g[:, :, :width, :].sum(axis=2)
        g[:, :, width + W - 1, :] += g[:, :, width + W:, :].sum(axis=2)
        return (g[:, width:width + H, width:width + W, :],)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractViolation("matmul expects operands with ndim >= 2")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    N, Hp, Wp, C = xp.shape
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    taps = [xp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
            for i in range(kh) for j in range(kw)]
    cols = np.concatenate(taps, axis=-1).reshape(N * Ho * Wo, kh * kw * C)  # (kh, kw, Ci) order
    return cols, Ho, Wo


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (N,H,W,Ci); ``w``: (kh,kw,Ci,Co); ``b``: (Co,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ContractViolation(f"conv2d shape mismatch: x{x.shape} w{w.shape}")
    kh, kw, ci, co = w.shape
    N, H, W, _ = x.shape
    xd = x.data
    wmat = w.data.reshape(kh * kw * ci, co)
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, ::stride, ::stride, :]
        Ho, Wo = xs.shape[1], xs.shape[2]
        cols = xs.reshape(-1, ci)
        out = cols @ wmat
    else:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
        cols, Ho, Wo = _im2col(xp, kh, kw, stride)
        out = cols @ wmat
        cols = None  # recomputed in backward to bound memory
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(N, Ho, Wo, co)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(-1, co)
        if kh == 1 and kw == 1 and padding == 0:
            c = xd[:, ::stride, ::stride, :].reshape(-1, ci)
        else:
            xp_ = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
            c, _, _ = _im2col(xp_, kh, kw, stride)
        gw = (c.T @ gmat).reshape(kh, kw, ci, co) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gmat @ wmat.T
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(xd)
                gx[:, ::stride, ::stride, :] = dcols.reshape(N, Ho, Wo, ci)
            else:
                dcols = dcols.reshape(N, Ho, Wo, kh, kw, ci)
                gxp = np.zeros((N, H + 2 * padding, W + 2 * padding, ci), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * (Ho - 1) + 1:stride,
                            j:j + stride * (Wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
                gx = gxp[:, padding:padding + H, padding:padding + W, :]
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _node(out, parents, backward)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centers, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i1] += frac
    return m


def resize_bilinear(x, size) -> Tensor:
    """Bilinear resize of an NHWC tensor to spatial ``size`` = (H_out, W_out)."""
    x = as_tensor(x)
    N, H, W, C = x.shape
    Ho, Wo = size
    ry = _resize_matrix(H, Ho, x.dtype)
    rx = _resize_matrix(W, Wo, x.dtype)
    out = np.einsum("oh,nhwc->nowc", ry, x.data, optimize=True)
    out = np.einsum("pw,nowc->nopc", rx, out, optimize=True)

    def backward(g):
        t = np.einsum("pw,nopc->nowc", rx, g, optimize=True)
        return (np.einsum("oh,nowc->nhwc", ry, t, optimize=True),)

    return _node(out, (x,), backward)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=(1, 2), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv

    def backward(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gxm = (g * xh).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - xh * gxm),)

    return _node(xh, (x,), backward)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def grid_sample(img, coords) -> Tensor:
    """Bilinear sampling with border clamping.

    ``img`` is (N,H,W,C); ``coords`` is (N,Ho,Wo,2) holding pixel positions
    (x, y).  Coordinates outside the image are clamped to the border, and the
    gradient with respect to a clamped coordinate is zero.
    """
    img, coords = as_tensor(img), as_tensor(coords)
    if img.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2 or coords.shape[0] != img.shape[0]:
        raise ContractViolation(f"grid_sample shape mismatch: img{img.shape} coords{coords.shape}")
    N, H, W, C = img.shape
    cd = coords.data
    cx, cy = cd[..., 0], cd[..., 1]
    x = np.clip(cx, 0, W - 1)
    y = np.clip(cy, 0, H - 1)
    x0 = np.clip(np.floor(x), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0)[..., None].astype(img.dtype)
    wy = (y - y0)[..., None].astype(img.dtype)
    base = (np.arange(N) * H * W).reshape(N, 1, 1)
    ia = base + y0 * W + x0
    ib = base + y0 * W + x1
    ic = base + y1 * W + x0
    idd = base + y1 * W + x1
    flat = img.data.reshape(N * H * W, C)
    va, vb, vc, vd = flat[ia], flat[ib], flat[ic], flat[idd]
    out = (va * (1 - wx) * (1 - wy) + vb * wx * (1 - wy)
           + vc * (1 - wx) * wy + vd * wx * wy)
    inside_x = ((cx >= 0) & (cx <= W - 1) & (W > 1)).astype(img.dtype)
    inside_y = ((cy >= 0) & (cy <= H - 1) & (H > 1)).astype(img.dtype)

    def backward(g):
        gi = gc = None
        if img.requires_grad:
            n_el = N * H * W * C
            chan = np.arange(C)
            acc = np.zeros(n_el, dtype=np.float64)
            for idx, wgt in ((ia, (1 - wx) * (1 - wy)), (ib, wx * (1 - wy)),
                             (ic, (1 - wx) * wy), (idd, wx * wy)):
                flat_idx = (idx[..., None] * C + chan).reshape(-1)
                acc += np.bincount(flat_idx, weights=(g * wgt).reshape(-1), minlength=n_el)
            gi = acc.reshape(N, H, W, C).astype(img.dtype)
        if coords.requires_grad:
            dx = ((vb - va) * (1 - wy) + (vd - vc) * wy) * g
            dy = ((vc - va) * (1 - wx) + (vd - vb) * wx) * g
            gc = np.stack([dx.sum(-1) * inside_x, dy.sum(-1) * inside_y], axis=-1).astype(coords.dtype)
        return gi, gc

    return _node(out, (img, coords), backward)


def pixel_grid(H: int, W: int, dtype=None) -> np.ndarray:
    """(H, W, 2) array of (x, y) pixel coordinates."""
    ys, xs = np.mgrid[0:H, 0:W]
    return np.stack([xs, ys], axis=-1).astype(dtype or _default_dtype)


def warp_bilinear(source, flow) -> Tensor:
    """Sample ``source`` at ``p + flow(p)``.

    Accepts a single H×W×C image with an H×W×2 flow, or NHWC batches.
    """
    source, flow = as_tensor(source), as_tensor(flow)
    single = source.ndim == 3
    if single:
        source = reshape(source, (1,) + source.shape)
        flow = reshape(flow, (1,) + flow.shape)
    if flow.ndim != 4 or flow.shape[-1] != 2 or flow.shape[:3] != source.shape[:3]:
        raise ContractViolation(f"warp shape mismatch: source{source.shape} flow{flow.shape}")
    H, W = source.shape[1], source.shape[2]
    coords = add(flow, pixel_grid(H, W, flow.dtype))
    out = grid_sample(source, coords)
    if single:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# backprop and gradient checking
# ---------------------------------------------------------------------------

def backprop(root: Tensor, params: Optional[Sequence[Tensor]] = None) -> dict:
    """Reverse-mode gradients of scalar ``root`` with respect to every leaf.

    Returns ``{leaf: ndarray}``.  Leaves listed in ``params`` that are not
    reachable (or sit behind a detach) get zero gradients.  Each leaf's
    ``.grad`` slot is set as well.
    """
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ContractViolation("backprop needs a scalar root tensor")
    nodes = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in nodes:
            continue
        nodes[n._id] = n
        for p in n._parents:
            if p._id >= n._id:
                raise ContractViolation("cycle detected in graph")
            if p.requires_grad and p._id not in nodes:
                stack.append(p)
    grads = {root._id: np.ones_like(root.data)}
    result = {}
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if n._backward is None:
            if n.requires_grad:
                result[n] = np.array(g, dtype=n.dtype).reshape(n.shape)
            continue
        for p, gp in zip(n._parents, n._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + gp
            else:
                grads[p._id] = gp
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    for leaf, g in result.items():
        leaf.grad = g
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: Optional[tuple] = None
    failure: Optional[str] = None


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, tol: float = 1e-4,
               indices: Optional[Sequence[tuple]] = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    ``indices`` restricts probing to a subset of coordinates.  Relative error
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True, dtype=base.dtype)
    try:
        out = f(leaf)
        analytic = backprop(out, [leaf])[leaf]
    except FloatingPointError as exc:  # pragma: no cover - depends on np.seterr
        return GradCheckReport(float("inf"), False, None, f"analytic pass failed: {exc}")
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        return GradCheckReport(float("inf"), False, bad, f"non-finite analytic gradient at {bad}")
    if indices is None:
        indices = list(np.ndindex(*base.shape))
    worst, worst_idx = 0.0, None
    for idx in indices:
        idx = tuple(int(i) for i in idx)
        vals = []
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe[idx] += sign * eps
            with np.errstate(all="ignore"):
                v = f(Tensor(probe, dtype=probe.dtype)).data
            vals.append(float(np.asarray(v).reshape(-1)[0]))
        if not all(np.isfinite(vals)):
            return GradCheckReport(float("inf"), False, idx, f"non-finite value while probing {idx}")
        numeric = (vals[0] - vals[1]) / (2 * eps)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst, worst_idx = rel, idx
    return GradCheckReport(worst, worst <= tol, worst_idx)
