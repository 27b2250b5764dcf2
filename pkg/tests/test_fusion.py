import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avdepth import ops
from avdepth.fusion import (
    AdaptedFusion,
    AttentionNet,
    BilinearFusion,
    LossError,
    combine_depth,
    concat_fusion,
    dot_fusion,
    log_l1_loss,
)
from avdepth.model import AVDepthModel
from avdepth.nets import ConfigError, NetConfig
from avdepth.tensor import DimensionError, Tensor


def identity_bilinear(n):
    f = BilinearFusion(n, 1, np.random.default_rng(0))
    for A, b in ((f.A_img, f.b_img), (f.A_mat, f.b_mat)):
        A.data[...] = np.eye(n)[None]
        b.data[...] = 0.0
    return f


class TestBilinear:
    def test_hand_expansion(self):
        fe = Tensor(np.array([[1.0, 2.0]]))
        fi = Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
        out = ops.bilinear_map(fe, Tensor(np.eye(2)[None]), fi, Tensor(np.array([5.0])))
        assert out.data.item() == 16.0

    def test_matches_per_pixel_quadratic_form(self, rng):
        B, N, K, h, w = 2, 5, 3, 2, 3
        fe, A, fm, b = rng.normal(size=(B, N)), rng.normal(size=(K, N, N)), rng.normal(size=(B, N, h, w)), rng.normal(size=K)
        out = ops.bilinear_map(Tensor(fe), Tensor(A), Tensor(fm), Tensor(b)).data
        for bi in range(B):
            for j in range(K):
                for p in range(h):
                    for q in range(w):
                        ref = fe[bi] @ A[j] @ fm[bi, :, p, q] + b[j]
                        assert out[bi, j, p, q] == pytest.approx(ref, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_identity_reduces_to_dot_exactly(self, seed):
        rng = np.random.default_rng(seed)
        n = 6
        fe, fi, fm = Tensor(rng.normal(size=(2, n))), Tensor(rng.normal(size=(2, n, 3, 3))), Tensor(rng.normal(size=(2, n, 3, 3)))
        bil = identity_bilinear(n)(fe, fi, fm).data
        assert np.array_equal(bil, dot_fusion(fe, fi, fm).data)

    def test_zero_echo_gives_bias(self, rng):
        f = BilinearFusion(4, 3, rng)
        out = f(Tensor(np.zeros((1, 4))), Tensor(rng.normal(size=(1, 4, 2, 2))), Tensor(rng.normal(size=(1, 4, 2, 2))))
        np.testing.assert_array_equal(out.data[0, :3], np.broadcast_to(f.b_img.data[:, None, None], (3, 2, 2)))
        np.testing.assert_array_equal(out.data[0, 3:], np.broadcast_to(f.b_mat.data[:, None, None], (3, 2, 2)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), c=st.floats(0.01, 100))
    def test_linear_in_echo_feature(self, seed, c):
        rng = np.random.default_rng(seed)
        f = BilinearFusion(3, 2, rng)
        fe, fi, fm = rng.normal(size=(1, 3)), rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
        bias = np.concatenate([f.b_img.data, f.b_mat.data])[None, :, None, None]
        base = f(Tensor(fe), Tensor(fi), Tensor(fm)).data - bias
        scaled = f(Tensor(c * fe), Tensor(fi), Tensor(fm)).data - bias
        np.testing.assert_allclose(scaled, c * base, rtol=1e-9, atol=1e-12)

    def test_fstar_is_concat(self, rng):
        f = BilinearFusion(4, 2, rng)
        args = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4, 2, 2))), Tensor(rng.normal(size=(1, 4, 2, 2)))
        fi, fm = f.maps(*args)
        np.testing.assert_array_equal(f(*args).data, np.concatenate([fi.data, fm.data], axis=1))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ops.bilinear_map(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 4, 1, 1))))


class TestSimpleFusions:
    def test_dot_selects_channel(self, rng):
        fi = rng.normal(size=(1, 4, 3, 3))
        fe = np.zeros((1, 4))
        fe[0, 0] = 1
        out = dot_fusion(Tensor(fe), Tensor(fi), Tensor(fi))
        np.testing.assert_array_equal(out.data[0, 0], fi[0, 0])

    def test_concat_channels(self, rng):
        out = concat_fusion(Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(2, 5, 2, 2))), Tensor(rng.normal(size=(2, 5, 2, 2))))
        assert out.shape == (2, 15, 2, 2)

    @pytest.mark.parametrize("kind", ["dot", "concat"])
    def test_adapter_width(self, kind, rng):
        f = AdaptedFusion(kind, 5, 8, rng)
        out = f(Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(2, 5, 2, 2))), Tensor(rng.normal(size=(2, 5, 2, 2))))
        assert out.shape == (2, 8, 2, 2)

    def test_mismatched_features(self, rng):
        with pytest.raises(DimensionError):
            dot_fusion(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4, 1, 1))), Tensor(np.ones((1, 4, 1, 1))))


class TestAttention:
    def test_toy_five_stages(self, rng):
        net = AttentionNet(32, NetConfig.toy(), rng)
        a = net(Tensor(rng.normal(size=(2, 32, 1, 1)))).data
        assert a.shape == (2, 1, 32, 32) and a.min() > 0 and a.max() < 1
        assert len(net.dec.blocks) + 1 == 5

    def test_full_widths_at_128(self, rng):
        net = AttentionNet(128, NetConfig.full(128), rng)
        widths = [b.conv.weight.shape[1] for b in net.dec.blocks] + [net.dec.head.weight.shape[1]]
        assert widths == [512, 256, 128, 64, 1]

    def test_spatial_mismatch(self, rng):
        net = AttentionNet(8, NetConfig.toy(), rng)
        with pytest.raises(ConfigError):
            net(Tensor(np.ones((1, 8, 2, 2))))

    @pytest.mark.parametrize("fusion", ["bilinear", "dot", "concat"])
    def test_every_variant_gives_valid_alpha(self, fusion, rng):
        spec_shape = (40, 30)
        m = AVDepthModel(NetConfig.toy(spectro_shape=spec_shape), fusion)
        m.eval()
        a = m(Tensor(rng.random((2, 2) + spec_shape)), Tensor(rng.random((2, 3, 32, 32))))["alpha"].data
        assert a.min() > 0 and a.max() < 1


class TestCombine:
    def test_endpoints_bitwise(self, rng):
        de, di = rng.uniform(0, 9, (2, 1, 4, 4)), rng.uniform(0, 9, (2, 1, 4, 4))
        ones, zeros = Tensor(np.ones(de.shape)), Tensor(np.zeros(de.shape))
        assert np.array_equal(combine_depth(ones, Tensor(de), Tensor(di)).data, de)
        assert np.array_equal(combine_depth(zeros, Tensor(de), Tensor(di)).data, di)

    def test_midpoint(self):
        s = (1, 1, 2, 2)
        out = combine_depth(Tensor(np.full(s, 0.5)), Tensor(np.full(s, 2.0)), Tensor(np.full(s, 4.0)))
        assert np.all(out.data == 3.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_convex_bound(self, seed):
        rng = np.random.default_rng(seed)
        s = (1, 1, 3, 3)
        a, de, di = rng.uniform(1e-6, 1 - 1e-6, s), rng.uniform(0, 10, s), rng.uniform(0, 10, s)
        out = combine_depth(Tensor(a), Tensor(de), Tensor(di)).data
        assert np.all(out >= np.minimum(de, di) - 1e-12) and np.all(out <= np.maximum(de, di) + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            combine_depth(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestLoss:
    def test_perfect_prediction(self, rng):
        d = rng.uniform(1, 5, (2, 1, 4, 4))
        assert log_l1_loss(Tensor(d), d).data == 0.0

    def test_e_minus_one_gives_one(self, rng):
        d = rng.uniform(1, 5, (2, 1, 4, 4))
        assert log_l1_loss(Tensor(d + math.e - 1), d).data == pytest.approx(1.0, abs=1e-14)

    def test_half_masked_still_one(self, rng):
        d = rng.uniform(1, 5, (1, 1, 4, 4))
        d[..., :2] = 0.0
        pred = d + math.e - 1
        pred[..., :2] = 100.0  # garbage at masked pixels
        loss = log_l1_loss(Tensor(pred), d)
        # per-pixel loop oracle over valid pixels
        vals = [math.log1p(abs(p - t)) for p, t in zip(pred.ravel(), d.ravel()) if t > 0]
        assert loss.data == pytest.approx(sum(vals) / len(vals), abs=1e-14) == pytest.approx(1.0)

    def test_masked_pixels_get_zero_gradient(self, rng):
        d = rng.uniform(1, 5, (2, 1, 6, 6))
        mask = rng.random(d.shape) < 0.3
        d[mask] = 0.0
        pred = Tensor(rng.uniform(1, 5, d.shape), requires_grad=True)
        log_l1_loss(pred, d).backward()
        assert np.all(pred.grad[mask] == 0.0)
        assert np.all(pred.grad[~mask] != 0.0)

    def test_no_valid_pixels(self):
        with pytest.raises(LossError):
            log_l1_loss(Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)))
