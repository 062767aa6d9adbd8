import numpy as np
import pytest

from dyncell import autograd as ag
from dyncell import genotype as gt
from dyncell.autograd import Parameter, ShapeError, Tensor
from dyncell.gradcheck import finite_difference
from dyncell.ops import (AggregationOp, CandidateOp, DeformableConv,
                         FilterPredict, Harmonizer, build_agg, build_op)


def rng_for(seed):
    return np.random.default_rng(seed)


def fd(f, wrt, tol=1e-4, **kw):
    err = finite_difference(f, wrt, **kw)
    assert err < tol, f"finite-difference mismatch: {err}"


class TestCandidateOps:
    def test_skip_is_identity_with_zero_params(self):
        op = build_op(4, 4, rng_for(0))
        x = Tensor(rng_for(1).standard_normal((1, 4, 8, 8)))
        assert op.param_count() == 0
        np.testing.assert_array_equal(op(x).data, x.data)

    def test_pool_up_identity_projection_preserves_constant(self):
        op = build_op(1, 3, rng_for(2))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        op.inner.proj.w.data = w
        x = Tensor(np.full((2, 3, 8, 8), 0.7))
        np.testing.assert_allclose(op(x).data, 0.7, atol=1e-14)

    def test_channel_mismatch_rejected(self):
        op = build_op(0, 4, rng_for(3))
        with pytest.raises(ShapeError, match="channels"):
            op(Tensor(np.zeros((1, 5, 8, 8))))

    @pytest.mark.parametrize("op_id", [0, 1, 2, 3, 5])
    def test_shape_closure(self, op_id):
        op = build_op(op_id, 4, rng_for(4 + op_id))
        x = Tensor(rng_for(20).standard_normal((2, 4, 8, 8)))
        assert op(x).shape == (2, 4, 8, 8)

    @pytest.mark.parametrize("op_id", [0, 2, 3, 5])
    def test_finite_difference(self, op_id):
        rng = rng_for(30 + op_id)
        op = build_op(op_id, 4, rng)
        x = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
        r = rng.standard_normal((1, 4, 8, 8))
        if op_id == 5:
            # start from small nonzero offsets so sampling is off-lattice
            op.inner.offset.w.data = rng.standard_normal(
                op.inner.offset.w.shape) * 0.05
        fd(lambda: ag.tsum(ag.mul(op(x), Tensor(r))),
           [x] + op.parameters(), max_per_tensor=8, rng=rng)


class TestDeformableConv:
    def test_zero_offsets_degenerate_to_standard_conv(self):
        rng = rng_for(40)
        block = DeformableConv(rng, 3)
        x = Tensor(rng.standard_normal((2, 3, 7, 7)))
        got = block(x)
        ref = ag.conv2d(x, block.main_w, block.main_b, pad=1)
        np.testing.assert_allclose(got.data, ref.data, atol=1e-10)

    def test_constant_input_interior_matches_standard_conv(self):
        rng = rng_for(41)
        block = DeformableConv(rng, 2)
        # bias-driven offsets, bounded by 0.4px: every tap of a pixel two or
        # more away from the border samples strictly inside the image
        block.offset.b.data = rng.uniform(-0.4, 0.4, 18)
        x = Tensor(np.full((1, 2, 9, 9), 1.7))
        got = block(x)
        ref = ag.conv2d(x, block.main_w, block.main_b, pad=1)
        np.testing.assert_allclose(got.data[:, :, 2:-2, 2:-2],
                                   ref.data[:, :, 2:-2, 2:-2], atol=1e-10)


class TestAggregations:
    def inputs(self, seed, c=4, hw=8):
        rng = rng_for(seed)
        a = Tensor(rng.standard_normal((2, c, hw, hw)))
        b = Tensor(rng.standard_normal((2, c, hw, hw)))
        return a, b

    def test_weighted_sum_degenerate_weights(self):
        agg = build_agg(0, 4, rng_for(50))
        a, b = self.inputs(51)
        np.testing.assert_allclose(agg(a, b).data, a.data + b.data, atol=1e-15)
        agg.inner.wa.data[:] = 0.0
        np.testing.assert_allclose(agg(a, b).data, b.data, atol=1e-15)

    def test_gated_mul_zero_gate_halves(self):
        agg = build_agg(5, 4, rng_for(52))
        a, _ = self.inputs(53)
        b = Tensor(np.zeros_like(a.data))
        np.testing.assert_allclose(agg(a, b).data, 0.5 * a.data, atol=1e-15)

    def test_affine_warp_identity_at_init(self):
        agg = build_agg(3, 4, rng_for(54))
        a, b = self.inputs(55)
        np.testing.assert_allclose(agg(a, b).data, a.data, atol=1e-10)

    def test_filter_predict_matches_enumeration_oracle(self):
        agg = build_agg(2, 3, rng_for(56))
        a, b = self.inputs(57, c=3, hw=6)
        got = agg(a, b).data

        # oracle: pool each channel of a to 3x3, L1-normalize, correlate
        def pooled(d):
            out = np.zeros((d.shape[0], d.shape[1], 3, 3))
            for i in range(3):
                for j in range(3):
                    h0, h1 = (i * 6) // 3, ((i + 1) * 6 + 2) // 3
                    w0, w1 = (j * 6) // 3, ((j + 1) * 6 + 2) // 3
                    out[:, :, i, j] = d[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
            return out

        f = pooled(a.data)
        f = f / (np.abs(f).sum(axis=(2, 3), keepdims=True) + FilterPredict.EPS)
        bp = np.pad(b.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(b.data)
        for n in range(2):
            for c in range(3):
                for i in range(6):
                    for j in range(6):
                        ref[n, c, i, j] = (
                            bp[n, c, i:i + 3, j:j + 3] * f[n, c]).sum()
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_unharmonized_inputs_rejected(self):
        agg = build_agg(0, 4, rng_for(58))
        a = Tensor(np.zeros((1, 4, 8, 8)))
        b = Tensor(np.zeros((1, 4, 4, 4)))
        with pytest.raises(ShapeError, match="unharmonized"):
            agg(a, b)

    @pytest.mark.parametrize("agg_id", range(6))
    def test_shape_closure(self, agg_id):
        agg = build_agg(agg_id, 4, rng_for(60 + agg_id))
        a, b = self.inputs(70 + agg_id)
        assert agg(a, b).shape == a.shape

    @pytest.mark.parametrize("agg_id", range(6))
    def test_finite_difference(self, agg_id):
        rng = rng_for(80 + agg_id)
        agg = build_agg(agg_id, 3, rng)
        a = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
        if agg_id == 3:
            # move the head off the exact-identity so sampling is off-lattice
            agg.inner.w.data = rng.standard_normal(agg.inner.w.shape) * 0.05
            agg.inner.b.data = agg.inner.b.data + rng.uniform(0.05, 0.2, 6)
        r = rng.standard_normal((1, 3, 6, 6))
        fd(lambda: ag.tsum(ag.mul(agg(a, b), Tensor(r))),
           [a, b] + agg.parameters(), max_per_tensor=8, rng=rng)


class TestHarmonizer:
    def test_identity_when_already_at_target(self):
        h = Harmonizer(rng_for(90), 3, 3)
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        h.proj.w.data = w
        x = Tensor(rng_for(91).standard_normal((1, 3, 8, 8)))
        np.testing.assert_allclose(h(x, 8, 8).data, x.data, atol=1e-14)

    def test_upsamples_coarse_slot_by_four(self):
        h = Harmonizer(rng_for(92), 8, 4)
        x = Tensor(rng_for(93).standard_normal((2, 8, 4, 4)))
        assert h(x, 16, 16).shape == (2, 4, 16, 16)

    def test_finite_difference_through_projection(self):
        rng = rng_for(94)
        h = Harmonizer(rng, 5, 3)
        x = Tensor(rng.standard_normal((1, 5, 4, 4)), requires_grad=True)
        r = rng.standard_normal((1, 3, 8, 8))
        fd(lambda: ag.tsum(ag.mul(h(x, 8, 8), Tensor(r))), [x] + h.parameters())


class TestParamCounts:
    @pytest.mark.parametrize("width", [4, 8, 16])
    def test_op_counts_match_allocation_walk(self, width):
        for op_id in range(6):
            op = build_op(op_id, width, rng_for(100 + op_id))
            walked = sum(p.data.size for p in op.parameters() if p.trainable)
            assert op.param_count() == walked
            assert walked == gt.op_param_count_formula(op_id, width)

    @pytest.mark.parametrize("width", [4, 8, 16])
    def test_agg_counts_match_allocation_walk(self, width):
        for agg_id in range(6):
            agg = build_agg(agg_id, width, rng_for(110 + agg_id))
            walked = sum(p.data.size for p in agg.parameters() if p.trainable)
            assert agg.param_count() == walked
            assert walked == gt.agg_param_count_formula(agg_id, width)

    def test_one_by_one_conv_count(self):
        h = Harmonizer(rng_for(120), 8, 8)
        assert h.param_count() == 8 * 8 + 8
