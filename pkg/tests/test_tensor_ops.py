"""Forward semantics of the tensor ops, checked against independent oracles."""

import mpmath
import numpy as np
import pytest

from voxseg import tensor as T
from voxseg.errors import DimensionError, NumericError


# =============================================================================
# matmul
# =============================================================================

class TestMatmul:
    def test_identity(self):
        a = T.tensor(np.eye(2), dtype=np.float64)
        b = T.tensor([[3.0, 4.0], [5.0, 6.0]], dtype=np.float64)
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_hand_computed(self):
        a = T.tensor([[1.0, 2.0]], dtype=np.float64)
        b = T.tensor([[3.0], [4.0]], dtype=np.float64)
        assert T.matmul(a, b).data.item() == pytest.approx(11.0)

    def test_against_triple_loop(self, rng):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        got = T.matmul(T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64)).data
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for p in range(5):
                    ref[i, j] += a[i, p] * b[p, j]
        assert np.abs(got - ref).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4, 2))))


# =============================================================================
# softmax
# =============================================================================

class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.tensor([0.0, 0.0, 0.0], dtype=np.float64), axis=0).data
        assert out == pytest.approx([1 / 3] * 3, abs=1e-15)

    def test_stabilized_no_overflow(self):
        out = T.softmax(T.tensor([1000.0, 0.0], dtype=np.float64), axis=0).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_exp_normalize_oracle(self):
        # arbitrary-precision exp-normalize at 50 digits
        with mpmath.workdps(50):
            es = [mpmath.e ** v for v in (1, 2, 3)]
            tot = sum(es)
            ref = np.array([float(e / tot) for e in es])
        got = T.softmax(T.tensor([1.0, 2.0, 3.0], dtype=np.float64), axis=0).data
        assert np.abs(got - ref).max() < 1e-15

    def test_slices_sum_to_one_large_magnitude(self, rng):
        x = T.tensor(rng.uniform(-1e3, 1e3, size=(6, 7)), dtype=np.float64)
        out = T.softmax(x, axis=1).data
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-6


# =============================================================================
# conv3d
# =============================================================================

def conv3d_loop_oracle(x, w, stride, pad):
    """Six-nested-loop direct convolution reference."""
    b_n, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    do = (d + 2 * pad - kd) // stride + 1
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((b_n, co, do, ho, wo))
    for b in range(b_n):
        for o in range(co):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for c in range(ci):
                            for a in range(kd):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        id_ = od * stride + a - pad
                                        ih = oh * stride + bb - pad
                                        iw = ow * stride + cc - pad
                                        if 0 <= id_ < d and 0 <= ih < h and 0 <= iw < wd:
                                            acc += x[b, c, id_, ih, iw] * w[o, c, a, bb, cc]
                        y[b, o, od, oh, ow] = acc
    return y


class TestConv3d:
    def test_pointwise_identity_weight(self, rng):
        x = T.tensor(rng.standard_normal((1, 3, 4, 4, 4)), dtype=np.float64)
        w = T.tensor(np.eye(3).reshape(3, 3, 1, 1, 1), dtype=np.float64)
        out = T.conv3d(x, w)
        assert np.array_equal(out.data, x.data)

    def test_all_ones_kernel_sums_27(self):
        x = T.tensor(np.ones((1, 1, 3, 3, 3)), dtype=np.float64)
        w = T.tensor(np.ones((1, 1, 3, 3, 3)), dtype=np.float64)
        out = T.conv3d(x, w)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == 27.0

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_against_loop_oracle(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 5, 4, 5))
        w = rng.standard_normal((4, 3, 3, 3, 3))
        got = T.conv3d(T.tensor(x, dtype=np.float64), T.tensor(w, dtype=np.float64),
                       stride=stride, padding=pad).data
        ref = conv3d_loop_oracle(x, w, stride, pad)
        assert np.abs(got - ref).max() < 1e-10

    def test_pointwise_equals_channel_matmul_bitwise(self, rng):
        b_n, ci, co = 2, 5, 4
        x = rng.standard_normal((b_n, ci, 3, 3, 3))
        w = rng.standard_normal((co, ci, 1, 1, 1))
        conv = T.conv3d(T.tensor(x, dtype=np.float64), T.tensor(w, dtype=np.float64)).data
        xt = T.transpose(T.tensor(x, dtype=np.float64), (0, 2, 3, 4, 1))
        xm = T.reshape(xt, (b_n * 27, ci))
        wm = T.transpose(T.reshape(T.tensor(w, dtype=np.float64), (co, ci)), (1, 0))
        mm = T.matmul(xm, wm).data.reshape(b_n, 3, 3, 3, co).transpose(0, 4, 1, 2, 3)
        assert np.array_equal(conv, mm)

    def test_nonpositive_output_extent(self):
        with pytest.raises(DimensionError):
            T.conv3d(T.tensor(np.zeros((1, 1, 2, 2, 2))),
                     T.tensor(np.zeros((1, 1, 3, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv3d(T.tensor(np.zeros((1, 2, 4, 4, 4))),
                     T.tensor(np.zeros((1, 3, 3, 3, 3))))


# =============================================================================
# avg_pool3d
# =============================================================================

class TestAvgPool:
    def test_constant_preserved(self):
        x = T.tensor(np.full((1, 2, 4, 4, 4), 7.5), dtype=np.float64)
        out = T.avg_pool3d(x, 2)
        assert out.shape == (1, 2, 2, 2, 2)
        assert np.array_equal(out.data, np.full((1, 2, 2, 2, 2), 7.5))

    def test_block_mean(self):
        x = T.tensor(np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2))
        assert T.avg_pool3d(x, 2).item() == 3.5

    def test_global_mean_conserved(self, rng):
        for seed in range(5):
            x = np.random.default_rng(seed).standard_normal((1, 3, 4, 4, 4))
            pooled = T.avg_pool3d(T.tensor(x, dtype=np.float64), 2).data
            assert abs(pooled.mean() - x.mean()) < 1e-12

    def test_indivisible_extent(self):
        with pytest.raises(DimensionError):
            T.avg_pool3d(T.tensor(np.zeros((1, 1, 5, 4, 4))), 2)


# =============================================================================
# grid_sample_trilinear
# =============================================================================

def corner_weight_oracle(value, coords):
    """Explicit 8-corner weighted sum, voxel-center convention with clamping."""
    c_n, d, h, w = value.shape
    out = np.zeros((coords.shape[0], c_n))
    for p in range(coords.shape[0]):
        gs = []
        for u, n in zip(coords[p], (d, h, w)):
            g = min(max(u * (n - 1), 0.0), n - 1) if n > 1 else 0.0
            i0 = min(int(np.floor(g)), n - 2) if n > 1 else 0
            gs.append((i0, g - i0))
        (i0, td), (j0, th), (k0, tw) = gs
        for bd in (0, 1):
            for bh in (0, 1):
                for bw in (0, 1):
                    wt = ((td if bd else 1 - td) * (th if bh else 1 - th)
                          * (tw if bw else 1 - tw))
                    out[p] += wt * value[:, min(i0 + bd, d - 1),
                                         min(j0 + bh, h - 1), min(k0 + bw, w - 1)]
    return out


class TestGridSample:
    def test_exact_at_voxel_centers(self, rng):
        v = rng.standard_normal((2, 3, 4, 5))
        d, h, w = 3, 4, 5
        centers = np.array([[i / (d - 1), j / (h - 1), k / (w - 1)]
                            for i in range(d) for j in range(h) for k in range(w)])
        out = T.grid_sample_trilinear(T.tensor(v, dtype=np.float64),
                                      T.tensor(centers, dtype=np.float64)).data
        ref = v.reshape(2, -1).T
        assert np.abs(out - ref).max() < 1e-12

    def test_linear_ramp_midpoint(self):
        d = 5
        ramp = np.arange(d, dtype=np.float64).reshape(1, d, 1, 1)
        ramp = np.broadcast_to(ramp, (1, d, 3, 3)).copy()
        out = T.grid_sample_trilinear(
            T.tensor(ramp, dtype=np.float64),
            T.tensor([[0.5, 0.5, 0.5]], dtype=np.float64)).data
        assert out[0, 0] == pytest.approx(0.5 * (d - 1))

    def test_against_corner_oracle(self, rng):
        v = rng.standard_normal((3, 4, 4, 4))
        coords = rng.uniform(-0.2, 1.2, size=(50, 3))  # includes clamped points
        got = T.grid_sample_trilinear(T.tensor(v, dtype=np.float64),
                                      T.tensor(coords, dtype=np.float64)).data
        ref = corner_weight_oracle(v, coords)
        assert np.abs(got - ref).max() < 1e-10

    def test_nan_coordinate_raises(self):
        with pytest.raises(NumericError):
            T.grid_sample_trilinear(T.tensor(np.zeros((1, 2, 2, 2))),
                                    T.tensor([[0.5, np.nan, 0.5]]))


# =============================================================================
# layer_norm / instance_norm
# =============================================================================

class TestNorms:
    def test_layer_norm_zero_mean_unit_var(self):
        x = T.tensor([[1.0, 2.0, 3.0]], dtype=np.float64)
        g = T.tensor(np.ones(3), dtype=np.float64)
        b = T.tensor(np.zeros(3), dtype=np.float64)
        out = T.layer_norm(x, g, b, axis=1).data
        assert out.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.std() == pytest.approx(1.0, abs=1e-3)

    def test_constant_slice_maps_to_beta(self):
        x = T.tensor(np.full((2, 4), 3.0), dtype=np.float64)
        g = T.tensor(np.ones(4), dtype=np.float64)
        b = T.tensor(np.full(4, 0.25), dtype=np.float64)
        out = T.layer_norm(x, g, b, axis=1).data
        assert np.abs(out - 0.25).max() < 1e-12

    def test_random_slices_normalized(self, rng):
        x = T.tensor(rng.standard_normal((5, 16)), dtype=np.float64)
        g = T.tensor(np.ones(16), dtype=np.float64)
        b = T.tensor(np.zeros(16), dtype=np.float64)
        out = T.layer_norm(x, g, b, axis=1).data
        assert np.abs(out.mean(axis=1)).max() < 1e-6
        assert np.abs(out.std(axis=1) - 1.0).max() < 1e-3

    def test_instance_norm_normalizes_spatial(self, rng):
        x = T.tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 5 + 2, dtype=np.float64)
        g = T.tensor(np.ones(3), dtype=np.float64)
        b = T.tensor(np.zeros(3), dtype=np.float64)
        out = T.instance_norm3d(x, g, b).data
        assert np.abs(out.mean(axis=(2, 3, 4))).max() < 1e-6
        assert np.abs(out.std(axis=(2, 3, 4)) - 1.0).max() < 1e-3


# =============================================================================
# elementwise
# =============================================================================

class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.elementwise(T.tensor([0.0]), kind="sigmoid").data[0] == 0.5

    def test_relu(self):
        out = T.elementwise(T.tensor([-3.0, 3.0]), kind="relu").data
        assert list(out) == [0.0, 3.0]

    def test_add_commutative_bitwise(self, rng):
        a = T.tensor(rng.standard_normal((4, 5)), dtype=np.float64)
        b = T.tensor(rng.standard_normal((4, 5)), dtype=np.float64)
        assert np.array_equal(T.elementwise(a, b, kind="add").data,
                              T.elementwise(b, a, kind="add").data)

    def test_sigmoid_saturation_finite(self):
        out = T.sigmoid(T.tensor([-1e4, 1e4], dtype=np.float64)).data
        assert np.isfinite(out).all()

    def test_incompatible_shape(self):
        with pytest.raises(DimensionError):
            T.add(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 2))))

    def test_scalar_broadcast(self):
        out = T.add(T.tensor([1.0, 2.0]), T.tensor([10.0]))
        assert list(out.data) == [11.0, 12.0]

    def test_scale(self):
        assert list(T.scale(T.tensor([2.0, -4.0]), 0.5).data) == [1.0, -2.0]


# =============================================================================
# structural ops + finite contract
# =============================================================================

class TestStructural:
    def test_reshape_transpose_roundtrip(self, rng):
        x = rng.standard_normal((2, 3, 4))
        t = T.tensor(x, dtype=np.float64)
        back = T.transpose(T.transpose(t, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x)

    def test_concat_slice_roundtrip(self, rng):
        a = T.tensor(rng.standard_normal((2, 3)), dtype=np.float64)
        b = T.tensor(rng.standard_normal((2, 2)), dtype=np.float64)
        cat = T.concat([a, b], axis=1)
        assert np.array_equal(T.slice_axis(cat, 1, 0, 3).data, a.data)
        assert np.array_equal(T.slice_axis(cat, 1, 3, 5).data, b.data)

    def test_broadcast_sum_consistency(self, rng):
        x = T.tensor(rng.standard_normal((3, 1)), dtype=np.float64, requires_grad=True)
        y = T.broadcast_to(x, (2, 3, 4))
        T.sum_all(y).backward()
        assert np.abs(x.grad - 8.0).max() < 1e-12

    def test_ops_finite_on_finite_inputs(self, rng):
        x = T.tensor(rng.uniform(-100, 100, (4, 4)), dtype=np.float64)
        for fn in (lambda: T.softmax(x, 1), lambda: T.gelu(x), lambda: T.sigmoid(x),
                   lambda: T.relu(x), lambda: T.scale(x, 3.0)):
            assert np.isfinite(fn().data).all()
