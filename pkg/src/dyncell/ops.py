"""The searchable building blocks: six candidate ops, six aggregations.

Every block maps harmonized (N, width, H, W) inputs to an output of the
same shape, so aggregated results can re-enter the sampling pool. Candidate
ops other than skip end in a relu; aggregations return their raw result.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Tensor
from .genotype import AGG_NAMES, N_AGGS, N_OPS, OP_NAMES


def he_conv(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Block:
    """Base for parameterized forward blocks."""

    def __init__(self):
        self.params: list[Parameter] = []

    def _param(self, data, trainable: bool = True) -> Parameter:
        p = Parameter(data, trainable=trainable)
        self.params.append(p)
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params if p.trainable)


class Conv(Block):
    def __init__(self, rng, c_in, c_out, k=1, stride=1, dilation=1,
                 groups=1, bias=True, weight=None):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.pad = ag.same_pad(k, dilation)
        if weight is None:
            weight = he_conv(rng, (c_out, c_in // groups, k, k))
        self.w = self._param(weight)
        self.b = self._param(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.w, self.b, stride=self.stride,
                         dilation=self.dilation, groups=self.groups,
                         pad=self.pad)


class SeparableConv(Block):
    """Depthwise k x k (optionally dilated, no bias) then pointwise 1x1."""

    def __init__(self, rng, c, k, dilation=1):
        super().__init__()
        self.depthwise = Conv(rng, c, c, k=k, dilation=dilation, groups=c,
                              bias=False)
        self.pointwise = Conv(rng, c, c, k=1)
        self.params = self.depthwise.params + self.pointwise.params

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class PoolUpConv(Block):
    """Global average pool, upsample back, 1x1 conv."""

    def __init__(self, rng, c):
        super().__init__()
        self.proj = Conv(rng, c, c, k=1)
        self.params = self.proj.params

    def __call__(self, x: Tensor) -> Tensor:
        pooled = ag.global_avg_pool(x)
        up = ag.bilinear_resize(pooled, x.shape[2], x.shape[3])
        return self.proj(up)


class Skip(Block):
    def __call__(self, x: Tensor) -> Tensor:
        return x


class DeformableConv(Block):
    """3x3 conv sampling at learned per-tap offsets.

    A plain 3x3 conv on the input predicts (dy, dx) for each of the nine
    taps; sampled values are gathered bilinearly (zeros outside) and
    combined with the main 3x3 weights. Offset weights start at zero, so
    the block is initialized exactly to a standard convolution.
    """

    def __init__(self, rng, c):
        super().__init__()
        self.offset = Conv(rng, c, 18, k=3,
                           weight=np.zeros((18, c, 3, 3)))
        self.main_w = self._param(he_conv(rng, (c, c, 3, 3)))
        self.main_b = self._param(np.zeros(c))
        self.params = self.offset.params + [self.main_w, self.main_b]

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        offsets = self.offset(x)  # (N, 18, H, W): (dy, dx) per tap
        base = ag.identity_grid(n, h, w)  # exact pixel centers
        out = None
        # normalized step per pixel along each axis (align-corners)
        sx = 2.0 / (w - 1) if w > 1 else 0.0
        sy = 2.0 / (h - 1) if h > 1 else 0.0
        for t, (u, v) in enumerate((u, v) for u in range(3) for v in range(3)):
            dy = ag.narrow(offsets, 1, 2 * t, 1)
            dx = ag.narrow(offsets, 1, 2 * t + 1, 1)
            shift_x = ag.scale(ag.add(dx, Tensor(np.full((1, 1, 1, 1),
                                                         float(v - 1)))), sx)
            shift_y = ag.scale(ag.add(dy, Tensor(np.full((1, 1, 1, 1),
                                                         float(u - 1)))), sy)
            shift = ag.concat([ag.permute(shift_x, (0, 2, 3, 1)),
                               ag.permute(shift_y, (0, 2, 3, 1))], axis=3)
            sampled = ag.grid_sample(x, ag.add(base, shift))
            w_tap = ag.narrow(ag.narrow(self.main_w, 2, u, 1), 3, v, 1)
            term = ag.conv2d(sampled, w_tap)
            out = term if out is None else ag.add(out, term)
        return ag.add(out, ag.reshape(self.main_b, (1, c, 1, 1)))


def build_op(op_id: int, width: int, rng: np.random.Generator) -> "CandidateOp":
    return CandidateOp(op_id, width, rng)


class CandidateOp(Block):
    """One row of the candidate-operation table, relu-terminated (except skip)."""

    def __init__(self, op_id: int, width: int, rng: np.random.Generator):
        super().__init__()
        if not 0 <= op_id < N_OPS:
            raise ShapeError(f"op id {op_id} out of range [0,{N_OPS})")
        self.op_id = op_id
        self.width = width
        self.name = OP_NAMES[op_id]
        if op_id == 0:
            self.inner = SeparableConv(rng, width, k=3)
        elif op_id == 1:
            self.inner = PoolUpConv(rng, width)
        elif op_id == 2:
            self.inner = SeparableConv(rng, width, k=3, dilation=3)
        elif op_id == 3:
            self.inner = SeparableConv(rng, width, k=5, dilation=6)
        elif op_id == 4:
            self.inner = Skip()
        else:
            self.inner = DeformableConv(rng, width)
        self.params = self.inner.params

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.width:
            raise ShapeError(
                f"{self.name}: expected {self.width} channels, got {x.shape[1]}")
        y = self.inner(x)
        if self.op_id == 4:
            return y
        return ag.relu(y)


class WeightedSum(Block):
    def __init__(self, rng, c):
        super().__init__()
        self.wa = self._param(np.ones((1, c, 1, 1)))
        self.wb = self._param(np.ones((1, c, 1, 1)))

    def __call__(self, a, b):
        return ag.add(ag.mul(a, self.wa), ag.mul(b, self.wb))


class ConcatConv(Block):
    def __init__(self, rng, c):
        super().__init__()
        self.proj = Conv(rng, 2 * c, c, k=1)
        self.params = self.proj.params

    def __call__(self, a, b):
        return self.proj(ag.concat_channels([a, b]))


class FilterPredict(Block):
    """First input pooled to a 3x3 per-channel filter applied to the second.

    The pooled filter is L1-normalized per channel (eps keeps it finite) and
    used as a per-sample depthwise correlation with zero padding 1.
    """

    EPS = 1e-8

    def __call__(self, a, b):
        n, c, h, w = b.shape
        f = ag.adaptive_avg_pool(a, 3, 3)
        l1 = ag.scale(ag.global_avg_pool(ag.absolute(f)), 9.0)
        f = ag.div(f, ag.add(l1, Tensor(np.full((1, 1, 1, 1), self.EPS))))
        bp = ag.pad2d(b, 1)
        out = None
        for u in range(3):
            for v in range(3):
                window = ag.narrow(ag.narrow(bp, 2, u, h), 3, v, w)
                tap = ag.narrow(ag.narrow(f, 2, u, 1), 3, v, 1)
                term = ag.mul(window, tap)
                out = term if out is None else ag.add(out, term)
        return out


class AffineWarp(Block):
    """Warp the first input on an affine grid predicted from the second.

    The head starts as the identity transform (zero weights, identity
    bias), so at initialization the block returns its first input.
    """

    def __init__(self, rng, c):
        super().__init__()
        self.w = self._param(np.zeros((c, 6)))
        self.b = self._param(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))

    def __call__(self, a, b):
        n, c, h, w = a.shape
        pooled = ag.reshape(ag.global_avg_pool(b), (n, c))
        theta = ag.linear(pooled, self.w, self.b)  # (N, 6)
        base = ag.identity_grid(n, h, w).data
        xs = Tensor(base[..., 0])  # (N,H,W)
        ys = Tensor(base[..., 1])

        def coef(i):
            return ag.reshape(ag.narrow(theta, 1, i, 1), (n, 1, 1))

        gx = ag.add(ag.add(ag.mul(coef(0), xs), ag.mul(coef(1), ys)), coef(2))
        gy = ag.add(ag.add(ag.mul(coef(3), xs), ag.mul(coef(4), ys)), coef(5))
        grid = ag.concat([ag.reshape(gx, (n, h, w, 1)),
                          ag.reshape(gy, (n, h, w, 1))], axis=3)
        return ag.grid_sample(a, grid)


class StackConv3d(Block):
    def __init__(self, rng, c):
        super().__init__()
        self.w = self._param(he_conv(rng, (c, c, 2, 3, 3)))
        self.b = self._param(np.zeros(c))

    def __call__(self, a, b):
        return ag.conv3d_2x3x3(ag.stack_depth(a, b), self.w, self.b)


class GatedMul(Block):
    def __call__(self, a, b):
        return ag.mul(a, ag.sigmoid(b))


def build_agg(agg_id: int, width: int, rng: np.random.Generator) -> "AggregationOp":
    return AggregationOp(agg_id, width, rng)


class AggregationOp(Block):
    """One row of the aggregation table, combining two harmonized inputs."""

    def __init__(self, agg_id: int, width: int, rng: np.random.Generator):
        super().__init__()
        if not 0 <= agg_id < N_AGGS:
            raise ShapeError(f"aggregation id {agg_id} out of range [0,{N_AGGS})")
        self.agg_id = agg_id
        self.width = width
        self.name = AGG_NAMES[agg_id]
        inner = [WeightedSum, ConcatConv, FilterPredict, AffineWarp,
                 StackConv3d, GatedMul][agg_id]
        self.inner = inner(rng, width) if agg_id in (0, 1, 3, 4) else inner()
        self.params = self.inner.params

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(
                f"{self.name}: unharmonized inputs {a.shape} vs {b.shape}")
        if a.shape[1] != self.width:
            raise ShapeError(
                f"{self.name}: expected {self.width} channels, got {a.shape[1]}")
        return self.inner(a, b)


class Harmonizer(Block):
    """1x1 projection to a common width, then resize to a target size."""

    def __init__(self, rng, c_in, width):
        super().__init__()
        self.proj = Conv(rng, c_in, width, k=1)
        self.params = self.proj.params

    def __call__(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        return ag.bilinear_resize(self.proj(x), out_h, out_w)
