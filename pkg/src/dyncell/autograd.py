"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive builds a node in an implicit tape (the DAG of parent links
plus vector-Jacobian closures). ``Tensor.backward`` walks that tape once in
reverse topological order and *accumulates* into ``.grad``, so calling it
twice without zeroing doubles every gradient.

Conventions fixed here and relied on everywhere else:
  - float64 only;
  - "same" padding for odd kernels is ``dilation * (k - 1) // 2``;
  - bilinear resize and sampling grids use the align-corners convention;
  - sampling outside the input rectangle reads zeros.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operand's shape violates a primitive's contract."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (e.g. for evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar used by mid-level code; all routed through primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` for every reachable node.

        ``self`` must hold exactly one element. Gradients flow through
        traversal-local buffers, so repeated calls add a full fresh pass
        into the persistent ``.grad`` arrays.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                acc = flows.get(id(parent))
                if acc is None:
                    flows[id(parent)] = pg.astype(np.float64, copy=True)
                else:
                    acc += pg


_param_ids = itertools.count()


class Parameter(Tensor):
    """A trainable leaf tensor with a unique id."""

    __slots__ = ("pid", "trainable")

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.pid = next(_param_ids)
        self.trainable = trainable

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.trainable = True
        self.requires_grad = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    return _node(data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc
    return _node(data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    return _node(data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from exc
    return _node(data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return _node(x.data * k, (x,), lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * sign,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    return _node(data, (a, b), lambda g: (
        _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def tsum(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}, {start + length}) outside axis {axis} "
            f"of shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(x.data[index].copy(), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat: empty input list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        ref_rest = ref[:axis] + ref[axis + 1:]
        other_rest = other[:axis] + other[axis + 1:]
        if len(ref) != len(other) or ref_rest != other_rest:
            raise ShapeError(
                f"concat: shapes {tuple(ref)} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i in range(len(xs)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(index)])
        return tuple(outs)

    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), vjp)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def stack_depth(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (N,C,H,W) maps into (N,C,2,H,W)."""
    if a.shape != b.shape or a.ndim != 4:
        raise ShapeError(f"stack_depth: need equal rank-4 shapes, got {a.shape}, {b.shape}")
    data = np.stack([a.data, b.data], axis=2)
    return _node(data, (a, b), lambda g: (g[:, :, 0], g[:, :, 1]))


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a rank-4 tensor."""
    if x.ndim != 4:
        raise ShapeError(f"pad2d: rank-4 input required, got {x.shape}")
    data = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return _node(data, (x,),
                 lambda g: (g[:, :, pad:g.shape[2] - pad, pad:g.shape[3] - pad],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (
        g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x:(N,F) @ w:(F,O) + b:(O,)"""
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def same_pad(kernel: int, dilation: int = 1) -> int:
    """Padding preserving H,W (odd kernels) so out = ceil(in/stride)."""
    if kernel % 2 != 1:
        raise ShapeError(f"same_pad: odd kernel required, got {kernel}")
    return dilation * (kernel - 1) // 2


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int,
                  dilation: int, oh: int, ow: int) -> np.ndarray:
    """View of padded input as (N, C, kh, kw, oh, ow) without copying."""
    sn, sc, sh, sw = xp.strides
    shape = (xp.shape[0], xp.shape[1], kh, kw, oh, ow)
    strides = (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, dilation: int,
                    groups: int, pad: int):
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    oh = (h + 2 * pad - span_h) // stride + 1
    ow = (wd + 2 * pad - span_w) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel span exceeds padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _conv_windows(xp, kh, kw, stride, dilation, oh, ow)
    # (N, G, Cg*kh*kw, oh*ow) columns against (G, Og, Cg*kh*kw) filters.
    cg = c // groups
    og = co // groups
    cols = np.ascontiguousarray(
        win.reshape(n, groups, cg, kh, kw, oh, ow)
           .reshape(n, groups, cg * kh * kw, oh * ow))
    wm = w.reshape(groups, og, cg * kh * kw)
    out = np.matmul(wm[None], cols).reshape(n, co, oh, ow)
    return out, cols, (xp.shape, oh, ow)


def _conv2d_backward(g: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray,
                     meta, stride: int, dilation: int, groups: int, pad: int):
    n, c, h, wd = x_shape
    co, cig, kh, kw = w.shape
    xp_shape, oh, ow = meta
    cg = c // groups
    og = co // groups
    gm = g.reshape(n, groups, og, oh * ow)
    grad_w = np.einsum("ngol,ngkl->gok", gm, cols).reshape(w.shape)
    grad_cols = np.matmul(w.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)[None], gm)
    grad_win = grad_cols.reshape(n, c, kh, kw, oh, ow)
    grad_xp = np.zeros(xp_shape)
    for u in range(kh):
        hu = u * dilation
        for v in range(kw):
            wv = v * dilation
            grad_xp[:, :, hu:hu + stride * oh:stride,
                    wv:wv + stride * ow:stride] += grad_win[:, :, u, v]
    if pad:
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + wd]
    else:
        grad_x = grad_xp
    return grad_x, grad_w


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, groups: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation, NCHW layout, weight (C_out, C_in/groups, kH, kW)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input rank {x.ndim} != 4 (shape {x.shape})")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight rank {w.ndim} != 4 (shape {w.shape})")
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    if c % groups or co % groups:
        raise ShapeError(
            f"conv2d: channels {c}->{co} not divisible by groups={groups}")
    if cig != c // groups:
        raise ShapeError(
            f"conv2d: weight in-channel dim {cig} != {c}/groups={c // groups}")
    out, cols, meta = _conv2d_forward(x.data, w.data, stride, dilation, groups, pad)

    def vjp(g):
        gx, gw = _conv2d_backward(g, x.shape, w.data, cols, meta,
                                  stride, dilation, groups, pad)
        return (gx, gw)

    y = _node(out, (x, w), vjp)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
        y = add(y, reshape(b, (1, co, 1, 1)))
    return y


def conv3d_2x3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depth-2 3D conv on (N,C,2,H,W): spatial pad 1, depth collapses to 1.

    Equivalent to summing two padded 3x3 correlations, one per depth slice.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d_2x3x3: input rank {x.ndim} != 5")
    if x.shape[2] != 2:
        raise ShapeError(f"conv3d_2x3x3: depth {x.shape[2]} != 2")
    if w.ndim != 5 or w.shape[2:] != (2, 3, 3):
        raise ShapeError(f"conv3d_2x3x3: weight shape {w.shape} != (Co,Ci,2,3,3)")
    n, c, _, h, wd = x.shape
    co = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv3d_2x3x3: weight in-channels {w.shape[1]} != {c}")
    out0, cols0, meta = _conv2d_forward(x.data[:, :, 0], w.data[:, :, 0], 1, 1, 1, 1)
    out1, cols1, _ = _conv2d_forward(x.data[:, :, 1], w.data[:, :, 1], 1, 1, 1, 1)

    def vjp(g):
        gx0, gw0 = _conv2d_backward(g, (n, c, h, wd), w.data[:, :, 0], cols0,
                                    meta, 1, 1, 1, 1)
        gx1, gw1 = _conv2d_backward(g, (n, c, h, wd), w.data[:, :, 1], cols1,
                                    meta, 1, 1, 1, 1)
        return (np.stack([gx0, gx1], axis=2),
                np.stack([gw0, gw1], axis=2))

    y = _node(out0 + out1, (x, w), vjp)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv3d_2x3x3: bias shape {b.shape} != ({co},)")
        y = add(y, reshape(b, (1, co, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _axis_lerp(n_in: int, n_out: int):
    """Align-corners source indices and weights for one axis."""
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, max(n_in - 2, 0))
    frac = src - lo
    if n_in == 1:
        frac = np.zeros_like(frac)
    return lo, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear interpolation of a rank-4 tensor."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: rank-4 input required, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid output size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return _node(x.data.copy(), (x,), lambda g: (g,))
    ylo, fy = _axis_lerp(h, out_h)
    xlo, fx = _axis_lerp(w, out_w)
    yhi = np.minimum(ylo + 1, h - 1)
    xhi = np.minimum(xlo + 1, w - 1)
    wy = fy[:, None]
    wx = fx[None, :]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    d = x.data
    out = (d[:, :, ylo[:, None], xlo[None, :]] * w00
           + d[:, :, ylo[:, None], xhi[None, :]] * w01
           + d[:, :, yhi[:, None], xlo[None, :]] * w10
           + d[:, :, yhi[:, None], xhi[None, :]] * w11)

    def vjp(g):
        gx = np.zeros_like(x.data)
        yy00, xx00 = np.broadcast_arrays(ylo[:, None], xlo[None, :])
        yy11, xx11 = np.broadcast_arrays(yhi[:, None], xhi[None, :])
        np.add.at(gx, (slice(None), slice(None), yy00, xx00), g * w00)
        np.add.at(gx, (slice(None), slice(None), yy00, xx11), g * w01)
        np.add.at(gx, (slice(None), slice(None), yy11, xx00), g * w10)
        np.add.at(gx, (slice(None), slice(None), yy11, xx11), g * w11)
        return (gx,)

    return _node(out, (x,), vjp)


def identity_grid(n: int, h: int, w: int) -> Tensor:
    """The (N,H,W,2) grid for which grid_sample is the identity."""
    gy, gx = np.meshgrid(np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1),
                         np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1),
                         indexing="ij")
    grid = np.stack([gx, gy], axis=-1)
    return Tensor(np.broadcast_to(grid, (n, h, w, 2)).copy())


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` at normalized grid locations.

    ``grid`` is (N,H,W,2) with (x, y) in [-1, 1], align-corners mapping;
    locations outside the input read zero. Differentiable in both arguments.
    """
    if x.ndim != 4:
        raise ShapeError(f"grid_sample: rank-4 input required, got {x.shape}")
    if grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != x.shape[0]:
        raise ShapeError(
            f"grid_sample: grid shape {grid.shape} incompatible with {x.shape}")
    n, c, h, w = x.shape
    oh, ow = grid.shape[1], grid.shape[2]
    gx = grid.data[..., 0]
    gy = grid.data[..., 1]
    # align-corners: -1 -> 0, +1 -> size-1
    ix = (gx + 1.0) * 0.5 * (w - 1)
    iy = (gy + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(ix).astype(np.intp)
    y0 = np.floor(iy).astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    fx = ix - x0
    fy = iy - y0

    def inside(xi, yi):
        return ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(np.float64)

    corners = []
    for yi, xi, wgt in ((y0, x0, (1 - fy) * (1 - fx)),
                        (y0, x1, (1 - fy) * fx),
                        (y1, x0, fy * (1 - fx)),
                        (y1, x1, fy * fx)):
        m = inside(xi, yi)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        corners.append((yc, xc, wgt * m, m))
    ni = np.arange(n)[:, None, None]
    out = np.zeros((n, c, oh, ow))
    vals = []
    for yc, xc, wm, m in corners:
        v = x.data[ni[..., None], np.arange(c)[None, None, None, :],
                   yc[..., None], xc[..., None]]  # (N,oh,ow,C)
        vals.append(v)
        out += (v * wm[..., None]).transpose(0, 3, 1, 2)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)  # (N,oh,ow,C)
        gx_in = np.zeros_like(x.data)
        for yc, xc, wm, m in corners:
            np.add.at(gx_in,
                      (ni[..., None], np.arange(c)[None, None, None, :],
                       yc[..., None], xc[..., None]),
                      gt * wm[..., None])
        # d out / d ix, d out / d iy with the corner weight derivatives
        dwx = [(-(1 - fy)), (1 - fy), -fy, fy]
        dwy = [(-(1 - fx)), -fx, (1 - fx), fx]
        gix = np.zeros((n, oh, ow))
        giy = np.zeros((n, oh, ow))
        for (yc, xc, wm, m), v, dx_, dy_ in zip(corners, vals, dwx, dwy):
            contrib = (gt * v).sum(axis=-1) * m
            gix += contrib * dx_
            giy += contrib * dy_
        ggrid = np.stack([gix * 0.5 * (w - 1), giy * 0.5 * (h - 1)], axis=-1)
        return (gx_in, ggrid)

    return _node(out, (x, grid), vjp)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: rank-4 input required, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _node(out, (x,),
                 lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def _pool_bounds(n_in: int, n_out: int):
    starts = (np.arange(n_out) * n_in) // n_out
    ends = -(-(np.arange(1, n_out + 1) * n_in) // n_out)  # ceil division
    return starts, ends


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over near-equal windows partitioning the input."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool: rank-4 input required, got {x.shape}")
    n, c, h, w = x.shape
    if out_h > h or out_w > w:
        raise ShapeError(
            f"adaptive_avg_pool: output {out_h}x{out_w} exceeds input {h}x{w}")
    hs, he = _pool_bounds(h, out_h)
    ws, we = _pool_bounds(w, out_w)
    out = np.empty((n, c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out[:, :, i, j] = x.data[:, :, hs[i]:he[i], ws[j]:we[j]].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                area = (he[i] - hs[i]) * (we[j] - ws[j])
                gx[:, :, hs[i]:he[i], ws[j]:we[j]] += \
                    g[:, :, i:i + 1, j:j + 1] / area
        return (gx,)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses and log-softmax
# ---------------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), vjp)


IGNORE_LABEL = 255


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean NLL over non-ignored pixels of (N,C,H,W) logits vs (N,H,W) labels."""
    if logits.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy: logits rank {logits.ndim} != 4")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(
            f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    c = logits.shape[1]
    bad = (labels != IGNORE_LABEL) & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ShapeError(
            f"softmax_cross_entropy: label {int(labels[bad][0])} outside [0,{c})")
    valid = labels != IGNORE_LABEL
    count = int(valid.sum())
    zl = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = zl - np.log(np.exp(zl).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    if count == 0:
        loss = np.array(0.0)
    else:
        loss = np.array(-(picked * valid).sum() / count)

    def vjp(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (soft - onehot) * valid[:, None] / count
        return (g * grad,)

    return _node(loss, (logits,), vjp)
