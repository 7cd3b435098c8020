import numpy as np
import pytest

from backwarp import ops
from backwarp.errors import ConfigError, DimensionError
from backwarp.tensor import Tensor


def naive_conv2d(x, w, b=None, stride=1, pad=1):
    """Six-loop reference convolution."""
    bs, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((bs, cin, h + 2 * pad, ww + 2 * pad), np.float64)
    xp[:, :, pad:pad + h, pad:pad + ww] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((bs, cout, ho, wo), np.float64)
    for n in range(bs):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[co]
                    for ci in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += w[co, ci, dy, dx] * xp[n, ci, i * stride + dy, j * stride + dx]
                    out[n, co, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        w = np.ones((1, 1, 1, 1), np.float32)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)),
                         stride=1, padding=0)
        assert np.array_equal(out.data, x)

    def test_constant_field_sum(self):
        x = np.ones((1, 1, 4, 4), np.float32)
        w = np.ones((1, 1, 2, 2), np.float32)
        out = ops.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=0)
        assert out.shape == (1, 1, 2, 2)
        assert np.allclose(out.data, 4.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        for stride in (1, 2):
            out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1)
            ref = naive_conv2d(x, w, b, stride=stride, pad=1)
            assert np.abs(out.data - ref).max() < 1e-5

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.ones((1, 3, 4, 4), np.float32))
        w = Tensor(np.ones((2, 4, 3, 3), np.float32))
        with pytest.raises(DimensionError, match="channel"):
            ops.conv2d(x, w, None)

    def test_dilated_matches_naive(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 9, 9)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        out = ops.conv2d(Tensor(x), Tensor(w), None, stride=1, padding=2, dilation=2)
        # dilation-2 3x3 equals a 5x5 kernel with zeros interleaved
        w5 = np.zeros((3, 2, 5, 5), np.float32)
        w5[:, :, ::2, ::2] = w
        ref = naive_conv2d(x, w5, None, stride=1, pad=2)
        assert np.abs(out.data - ref).max() < 1e-5


class TestConvTranspose2d:
    def test_doubles_spatial_dims(self):
        x = np.zeros((1, 1, 2, 2), np.float32)
        x[0, 0, 0, 0] = 1.0
        w = np.zeros((1, 1, 4, 4), np.float32)
        w[0, 0, 1, 1] = 1.0
        out = ops.conv_transpose2d(Tensor(x), Tensor(w), None, stride=2, padding=1)
        assert out.shape == (1, 1, 4, 4)

    def test_adjoint_of_conv2d(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((5, 3, 4, 4)).astype(np.float32)
        y = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
        lhs = float((ops.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data * y).sum())
        rhs = float((ops.conv_transpose2d(Tensor(y), Tensor(w), None).data * x).sum())
        assert abs(lhs - rhs) < 1e-4 * max(1.0, abs(lhs))

    def test_zero_input_gives_bias(self):
        x = np.zeros((1, 2, 3, 3), np.float32)
        w = np.random.default_rng(2).standard_normal((2, 4, 4, 4)).astype(np.float32)
        b = np.asarray([1.0, -2.0, 0.5, 3.0], np.float32)
        out = ops.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, b[None, :, None, None])

    def test_bad_geometry_rejected(self):
        x = Tensor(np.ones((1, 1, 2, 2), np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        with pytest.raises(ConfigError):
            ops.conv_transpose2d(x, w, None, stride=2, padding=1)


class TestGridSample:
    def test_zero_flow_identity_bit_exact(self):
        rng = np.random.default_rng(3)
        x = rng.random((2, 3, 8, 8)).astype(np.float32)
        flow = np.zeros((2, 2, 8, 8), np.float32)
        out = ops.grid_sample(Tensor(x), Tensor(flow))
        assert out.data.tobytes() == np.ascontiguousarray(x).tobytes()

    def test_integer_shift_round_trip(self):
        rng = np.random.default_rng(4)
        orig = rng.random((1, 3, 8, 8)).astype(np.float32)
        shifted = np.roll(orig, 1, axis=-1)  # content moved right by one
        flow = np.zeros((1, 2, 8, 8), np.float32)
        flow[:, 0] = 1.0
        out = ops.grid_sample(Tensor(shifted), Tensor(flow))
        assert np.abs(out.data[..., :, 1:-1] - orig[..., :, 1:-1]).max() < 1e-6

    def test_flow_gradient_on_ramp_equals_slope(self):
        h = w = 8
        slope = 0.37
        img = (slope * np.arange(w, dtype=np.float32))[None, None, None, :].repeat(h, 2)
        flow = Tensor(np.full((1, 2, h, w), 0.25, np.float32), requires_grad=True)
        out = ops.grid_sample(Tensor(np.ascontiguousarray(img)), flow)
        out.sum().backward()
        interior = flow.grad[0, 0, 2:-2, 2:-2]
        assert np.abs(interior - slope).max() < 1e-4

    def test_flow_channel_count_checked(self):
        x = Tensor(np.ones((1, 3, 4, 4), np.float32))
        f = Tensor(np.ones((1, 3, 4, 4), np.float32))
        with pytest.raises(DimensionError):
            ops.grid_sample(x, f)


def unit_features(rng, shape):
    """Random distinct features with unit per-pixel norm, so the
    self-correlation peak at zero displacement is exact (Cauchy-Schwarz)."""
    f = rng.standard_normal(shape).astype(np.float32)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


class TestCorrelation:
    def test_self_correlation_peaks_at_zero_displacement(self):
        rng = np.random.default_rng(5)
        f = Tensor(unit_features(rng, (1, 8, 10, 10)))
        cv = ops.correlation(f, f, max_disp=4)
        assert cv.shape == (1, 81, 10, 10)
        center = 4 * 9 + 4
        interior = cv.data[0, :, 4:-4, 4:-4]
        assert (interior.argmax(axis=0) == center).all()

    def test_shifted_peak(self):
        rng = np.random.default_rng(6)
        f1 = unit_features(rng, (1, 8, 10, 10))
        f2 = np.roll(f1, 1, axis=-1)  # f2(x) = f1(x-1): match lies at dx = +1
        cv = ops.correlation(Tensor(f1), Tensor(f2), max_disp=2)
        k = cv.data[0, :, 2:-2, 2:-2].argmax(axis=0)
        dx, dy = ops.correlation_displacement(int(k.flat[0]), max_disp=2)
        assert (k == k.flat[0]).all()
        assert (dx, dy) == (1, 0)

    def test_zero_partner_annihilates(self):
        rng = np.random.default_rng(7)
        f1 = Tensor(rng.standard_normal((1, 4, 6, 6)).astype(np.float32))
        f2 = Tensor(np.zeros((1, 4, 6, 6), np.float32))
        cv = ops.correlation(f1, f2, max_disp=2)
        assert not cv.data.any()

    def test_shape_mismatch(self):
        a = Tensor(np.ones((1, 2, 4, 4), np.float32))
        b = Tensor(np.ones((1, 2, 4, 5), np.float32))
        with pytest.raises(DimensionError):
            ops.correlation(a, b)


class TestAffineGridSample:
    def test_identity_theta_exact(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 7, 9)).astype(np.float32)
        theta = np.tile(np.asarray([1, 0, 0, 0, 1, 0], np.float32), (2, 1))
        out = ops.affine_grid_sample(Tensor(x), Tensor(theta))
        assert np.array_equal(out.data, x)

    def test_translation_matches_grid_sample(self):
        rng = np.random.default_rng(9)
        x = rng.random((1, 3, 9, 9)).astype(np.float32)
        w = 9
        theta = np.asarray([[1, 0, 2.0 / (w - 1), 0, 1, 0]], np.float32)
        out_affine = ops.affine_grid_sample(Tensor(x), Tensor(theta))
        flow = np.zeros((1, 2, 9, 9), np.float32)
        flow[:, 0] = 1.0
        out_flow = ops.grid_sample(Tensor(x), Tensor(flow))
        assert np.abs(out_affine.data - out_flow.data).max() < 1e-5

    def test_scale_on_constant_image(self):
        x = np.full((1, 3, 8, 8), 0.6, np.float32)
        theta = np.asarray([[0.5, 0, 0, 0, 0.5, 0]], np.float32)
        out = ops.affine_grid_sample(Tensor(x), Tensor(theta))
        assert np.allclose(out.data, 0.6, atol=1e-6)


class TestUpsample:
    def test_constant_upsamples_to_constant(self):
        x = Tensor(np.full((1, 3, 4, 5), 0.3, np.float32))
        out = ops.upsample_bilinear2x(x)
        assert out.shape == (1, 3, 8, 10)
        assert np.allclose(out.data, 0.3, atol=1e-7)

    def test_flow_values_rescaled(self):
        f = Tensor(np.ones((1, 2, 4, 4), np.float32))
        out = ops.upsample_bilinear2x(f, scale_values=True)
        assert np.allclose(out.data, 2.0, atol=1e-7)

    def test_linear_ramp_stays_linear_interior(self):
        w = 8
        ramp = np.arange(w, dtype=np.float32)[None, None, None, :].repeat(6, 2)
        out = ops.upsample_bilinear2x(Tensor(np.ascontiguousarray(ramp))).data
        # interior output samples the ramp at (j + 0.5)/2 - 0.5
        expect = (np.arange(2 * w) + 0.5) / 2 - 0.5
        inner = slice(2, -2)
        assert np.abs(out[0, 0, 4, inner] - expect[inner]).max() < 1e-6


class TestHeads:
    def test_global_avg_pool(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 5, 4, 6)).astype(np.float32)
        out = ops.global_avg_pool(Tensor(x))
        assert out.shape == (2, 5)
        assert np.allclose(out.data, x.mean(axis=(2, 3)), atol=1e-6)

    def test_linear(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        w = rng.standard_normal((4, 6)).astype(np.float32)
        b = rng.standard_normal(6).astype(np.float32)
        out = ops.linear(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, x @ w + b, atol=1e-6)


class TestEpe:
    def test_identical_flows_zero(self):
        f = Tensor(np.random.default_rng(12).standard_normal((1, 2, 5, 5)).astype(np.float32))
        assert float(ops.epe(f, f)) == 0.0

    def test_three_four_five(self):
        a = np.zeros((1, 2, 4, 4), np.float32)
        b = a.copy()
        b[:, 0] = 3.0
        b[:, 1] = 4.0
        assert abs(float(ops.epe(Tensor(a), Tensor(b))) - 5.0) < 1e-6
