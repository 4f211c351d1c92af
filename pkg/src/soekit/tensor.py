"""Dense float32 tensors with reverse-mode automatic differentiation.

Data lives in C-contiguous (row-major) numpy buffers. Every operation that
touches a tensor requiring gradients records itself on the output (parent
references plus a backward closure); ``backward`` replays the chain rule over
a topological ordering of that record. Tensors built with
``requires_grad=False`` never accumulate a gradient and record nothing.

Storage is float32. Constructing tensors as float64 is supported so tests can
run finite-difference oracles at higher precision; all ops preserve dtype.

conv2d accumulates its contraction in float64 before rounding once to the
storage dtype: float32 products are exact in float64, so the result is
bit-equal to a direct-summation oracle regardless of BLAS blocking.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    """N-dimensional dense array with optional gradient tracking.

    Attributes:
        data: C-contiguous numpy array (float32 unless built otherwise).
        requires_grad: whether backward accumulates into ``grad``.
        grad: numpy array of the same shape as ``data``, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = None

    # -- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """View of the same data with no graph linkage and no gradient."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)
        return t

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


# -- graph machinery ----------------------------------------------------------


def _make(data, parents, backward_fn, op: str) -> Tensor:
    """Wrap op output; record parents + backward only when a parent needs grad."""
    out = Tensor(data, requires_grad=False, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def topo_order(root: Tensor) -> list:
    """Tensors reachable from root, every node after all of its producers."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Gradients accumulate additively, so a tensor used on several paths
    receives the sum of all path contributions.
    """
    if loss.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any requires_grad tensor")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# -- broadcasting helpers ------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over dims that were broadcast up from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ops -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also the mask-gating op (mask as non-grad tensor)."""
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(out, (a,), bw, "log")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = a.data * s

    def bw(g):
        _accumulate(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(out, (a,), bw, "silu")


# -- reductions and reshaping ---------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gk, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.size // np.asarray(out).size

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gk / n, a.shape))

    return _make(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes_ = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes_)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes_)), (a,), bw, "transpose")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic slicing (slices/ints only); crop is the spatial special case."""
    out = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[idx] += g
        _accumulate(a, ga)

    return _make(np.ascontiguousarray(out), (a,), bw, "slice")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of a 2-D table by integer ids; duplicates allowed.

    Backward scatter-adds, so repeated ids accumulate their gradients.
    """
    if table.ndim != 2:
        raise ShapeError("gather_rows", f"table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"gather_rows: ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _make(np.ascontiguousarray(out), (table,), bw, "gather_rows")


def crop(a: Tensor, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Crop the last two axes to rows [y0, y1) and cols [x0, x1)."""
    h, w = a.shape[-2], a.shape[-1]
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ShapeError("crop", f"window [{y0}:{y1},{x0}:{x1}] outside map {h}x{w}")
    return slice_(a, (..., slice(y0, y1), slice(x0, x1)))


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channel axis by default)."""
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            raise ShapeError("concat", f"incompatible shapes {shapes} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, o0, o1 in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(o0, o1)
            _accumulate(t, g[tuple(sl)])

    return _make(out, tuple(tensors), bw, "concat")


# -- matmul and attention --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Log of softmax over the last axis, computed without underflow."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        _accumulate(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw, "log_softmax")


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q: (B, Nq, d), k: (B, Nk, d), v: (B, Nk, dv). Composed from matmul and
    softmax so gradients flow through the recorded primitives.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("cross_attention", f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("cross_attention", f"k/v sequence lengths differ: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), _as_tensor(scale, q.dtype))
    return matmul(softmax(scores), v)


# -- convolutions ------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Column matrix (B*ho*wo, C*kh*kw) with columns ordered (ci, ky, kx)."""
    b, c = xp.shape[0], xp.shape[1]
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, (CO, CI, KH, KW) kernel.

    Contraction runs in float64 and rounds once to the storage dtype, making
    the result bit-equal to direct summation in (ci, ky, kx) order.
    """
    if stride not in (1, 2):
        raise ShapeError("conv2d", f"stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"need 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d", f"kernel {w.shape} larger than padded input {x.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.astype(np.float64).reshape(co, -1)
    out64 = cols @ wm.T
    out = out64.reshape(b, ho, wo, co).transpose(0, 3, 1, 2).astype(x.dtype)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, co).astype(np.float64)
        if w.requires_grad:
            gw = (cols.T @ gm).T.reshape(co, ci, kh, kw)
            _accumulate(w, gw.astype(w.dtype))
        if x.requires_grad:
            gcols = (gm @ wm).reshape(b, ho, wo, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    gxp[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride] += gcols[:, :, ky, kx]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            _accumulate(x, gx.astype(x.dtype))

    return _make(out, (x, w), bw, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution, NCHW input, (CI, CO, KH, KW) kernel, stride 2."""
    if stride != 2:
        raise ShapeError("conv2d_transpose", f"stride must be 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d_transpose", f"need 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError("conv2d_transpose", f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    b, ci, hi, wi = x.shape
    _, co, kh, kw = w.shape
    ho, wo = (hi - 1) * stride + kh, (wi - 1) * stride + kw

    xm = x.data.transpose(0, 2, 3, 1).reshape(b * hi * wi, ci).astype(np.float64)
    wm = w.data.astype(np.float64).reshape(ci, co * kh * kw)
    prod = (xm @ wm).reshape(b, hi, wi, co, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out64 = np.zeros((b, co, ho, wo), np.float64)
    for ky in range(kh):
        for kx in range(kw):
            out64[:, :, ky : ky + hi * stride : stride, kx : kx + wi * stride : stride] += prod[:, :, ky, kx]
    out = out64.astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        sb, sc, sh, sw = g64.strides
        view = as_strided(
            g64,
            shape=(b, co, kh, kw, hi, wi),
            strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        )
        gcols = view.transpose(0, 4, 5, 1, 2, 3).reshape(b * hi * wi, co * kh * kw)
        if x.requires_grad:
            gx = (gcols @ wm.T).reshape(b, hi, wi, ci).transpose(0, 3, 1, 2)
            _accumulate(x, gx.astype(x.dtype))
        if w.requires_grad:
            gw = (xm.T @ gcols).reshape(ci, co, kh, kw)
            _accumulate(w, gw.astype(w.dtype))

    return _make(out, (x, w), bw, "conv2d_transpose")


# -- normalisation ------------------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalisation over (channels/groups, H, W) per sample."""
    if x.ndim != 4:
        raise ShapeError("group_norm", f"need 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError("group_norm", f"{c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm", f"gamma/beta must be ({c},), got {gamma.shape} and {beta.shape}")

    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            u = (g * gamma.data.reshape(1, c, 1, 1)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            mu_u = u.mean(axis=2, keepdims=True)
            mu_ux = (u * xh).mean(axis=2, keepdims=True)
            gx = inv * (u - mu_u - xh * mu_ux)
            _accumulate(x, gx.reshape(b, c, h, w).astype(x.dtype))

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "group_norm")


# -- resampling ---------------------------------------------------------------------


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out)
    return np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize of the last two axes (half-pixel centres)."""
    if x.ndim < 2:
        raise ShapeError("resize_nearest", f"need >= 2-D input, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    ii = _nearest_indices(h, out_h)
    jj = _nearest_indices(w, out_w)
    out = x.data[..., ii[:, None], jj[None, :]]

    def bw(g):
        ga = np.zeros_like(x.data)
        np.add.at(ga, (..., ii[:, None], jj[None, :]), g)
        _accumulate(x, ga)

    return _make(np.ascontiguousarray(out), (x,), bw, "resize_nearest")


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (half-pixel centres, edge clamp)."""
    if x.ndim < 2:
        raise ShapeError("resize_bilinear", f"need >= 2-D input, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        return i0c, i1c, frac.astype(x.dtype)

    i0, i1, fy = axis_coords(h, out_h)
    j0, j1, fx = axis_coords(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (
        x.data[..., i0[:, None], j0[None, :]] * w00
        + x.data[..., i0[:, None], j1[None, :]] * w01
        + x.data[..., i1[:, None], j0[None, :]] * w10
        + x.data[..., i1[:, None], j1[None, :]] * w11
    )

    def bw(g):
        ga = np.zeros_like(x.data)
        np.add.at(ga, (..., i0[:, None], j0[None, :]), g * w00)
        np.add.at(ga, (..., i0[:, None], j1[None, :]), g * w01)
        np.add.at(ga, (..., i1[:, None], j0[None, :]), g * w10)
        np.add.at(ga, (..., i1[:, None], j1[None, :]), g * w11)
        _accumulate(x, ga)

    return _make(np.ascontiguousarray(out), (x,), bw, "resize_bilinear")


# -- losses -------------------------------------------------------------------------


def huber(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber loss: 0.5 r^2 below delta, delta(|r| - delta/2) beyond."""
    if pred.shape != target.shape:
        raise ShapeError("huber", f"pred {pred.shape} vs target {target.shape}")
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    r = pred.data - target.data
    quad = np.abs(r) <= delta
    elems = np.where(quad, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    out = np.asarray(elems.mean(), dtype=pred.dtype)
    n = pred.size

    def bw(g):
        d = np.where(quad, r, delta * np.sign(r)) * (g / n)
        _accumulate(pred, d.astype(pred.dtype))
        _accumulate(target, (-d).astype(target.dtype))

    return _make(out, (pred, target), bw, "huber")


def masked_huber(pred: Tensor, target: Tensor, mask: Tensor, delta: float = 1.0) -> Tensor:
    """Huber over mask-gated residuals, averaged over masked entries only.

    The mask broadcasts against pred (e.g. one channel over many); the
    normaliser counts masked entries after broadcast, so values outside the
    mask can never move the loss.
    """
    if pred.shape != target.shape:
        raise ShapeError("masked_huber", f"pred {pred.shape} vs target {target.shape}")
    if mask.requires_grad:
        raise ValueError("masked_huber: mask must not require gradients")
    _check_broadcast("masked_huber", pred, mask)
    m = np.broadcast_to(mask.data, pred.shape)
    count = float(m.sum())
    if count == 0:
        raise ValueError("masked_huber: mask selects no elements (degenerate sample)")
    r = (pred.data - target.data) * m
    quad = np.abs(r) <= delta
    elems = np.where(quad, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    out = np.asarray(elems.sum() / count, dtype=pred.dtype)

    def bw(g):
        d = np.where(quad, r, delta * np.sign(r)) * m * (g / count)
        _accumulate(pred, d.astype(pred.dtype))
        _accumulate(target, (-d).astype(target.dtype))

    return _make(out, (pred, target), bw, "masked_huber")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error, composed from recorded primitives."""
    if pred.shape != target.shape:
        raise ShapeError("mse", f"pred {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))
