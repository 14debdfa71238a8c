"""Loss terms (SSIM, regularization, composite) against windowed oracles and
finite differences, plus the joint map optimizer's contracts."""

import numpy as np
import pytest

from fgs.core import (
    FrequencyClass,
    Gaussian,
    GaussianMap,
    Keyframe,
    KeyframeRole,
    MapKind,
    Pose,
    RgbdFrame,
)
from fgs.errors import NumericalError
from fgs.optimize import (
    LossWeights,
    OptimizeConfig,
    mapping_loss,
    optimize_maps,
    regularization_loss,
    regularization_with_gradient,
    ssim,
    ssim_with_gradient,
)
from fgs.renderer import RenderOutput, render
from conftest import make_intrinsics


def ssim_oracle(a, b):
    """Literal windowed SSIM: explicit 11x11 kernel, one window at a time."""
    x = np.arange(-5, 6, dtype=np.float64)
    k1d = np.exp(-0.5 * (x / 1.5) ** 2)
    k1d /= k1d.sum()
    w = np.outer(k1d, k1d)
    c1, c2 = 0.01**2, 0.03**2
    a = a[:, :, None] if a.ndim == 2 else a
    b = b[:, :, None] if b.ndim == 2 else b
    h, wd, nc = a.shape
    vals = []
    for c in range(nc):
        for i in range(h - 10):
            for j in range(wd - 10):
                wx = a[i:i + 11, j:j + 11, c]
                wy = b[i:i + 11, j:j + 11, c]
                ux = (w * wx).sum()
                uy = (w * wy).sum()
                vx = (w * (wx - ux) ** 2).sum()
                vy = (w * (wy - uy) ** 2).sum()
                vxy = (w * (wx - ux) * (wy - uy)).sum()
                vals.append(((2 * ux * uy + c1) * (2 * vxy + c2))
                            / ((ux**2 + uy**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def reg_oracle(scales, eps):
    m = scales[:, :2].mean()
    return float((np.abs(scales[:, :2] - m).sum()
                  + np.abs(scales[:, 2] - eps).sum()) / len(scales))


# scale batch with every entry well away from the L1 kinks
KINK_FREE_SCALES = np.array([
    [0.30, 0.20, 0.010],
    [0.10, 0.45, 0.002],
    [0.25, 0.15, 0.030],
])


class TestSsim:
    def test_identical_images(self, rng):
        img = rng.uniform(0.0, 1.0, size=(16, 16, 3))
        assert ssim(img, img) == 1.0

    def test_negative_pair_degrades(self, rng):
        img = rng.uniform(0.0, 1.0, size=(16, 16, 3))
        assert ssim(img, 1.0 - img) < 1.0

    def test_matches_windowed_oracle(self, rng):
        a = rng.uniform(0.0, 1.0, size=(18, 24, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)

    def test_grayscale_matches_oracle(self, rng):
        a = rng.uniform(0.0, 1.0, size=(20, 15))
        b = rng.uniform(0.0, 1.0, size=(20, 15))
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)

    def test_symmetry(self, rng):
        a = rng.uniform(0.0, 1.0, size=(14, 14, 3))
        b = rng.uniform(0.0, 1.0, size=(14, 14, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))

    def test_image_smaller_than_window(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))

    def test_gradient_matches_directional_derivative(self, rng):
        a = rng.uniform(0.2, 0.8, size=(16, 20, 3))
        b = rng.uniform(0.2, 0.8, size=(16, 20, 3))
        _, grad = ssim_with_gradient(a, b)
        v = rng.normal(size=a.shape)
        h = 1e-5
        fd = (ssim(a + h * v, b) - ssim(a - h * v, b)) / (2 * h)
        assert fd == pytest.approx(float((grad * v).sum()), rel=1e-4)

    def test_grayscale_gradient_shape(self, rng):
        a = rng.uniform(size=(12, 12))
        _, grad = ssim_with_gradient(a, a)
        assert grad.shape == (12, 12)


class TestRegularization:
    def test_uniform_batch_is_zero(self):
        scales = np.tile([0.2, 0.2, 1e-4], (5, 1))
        assert regularization_loss(scales, epsilon=1e-4) == 0.0

    def test_two_gaussian_hand_case(self):
        scales = np.array([[1.0, 1.0, 1e-4], [3.0, 3.0, 1e-4]])
        assert regularization_loss(scales, epsilon=1e-4) == pytest.approx(2.0, abs=1e-12)

    def test_random_batches_match_oracle(self, rng):
        for _ in range(5):
            scales = rng.uniform(0.01, 0.5, size=(rng.integers(1, 40), 3))
            assert regularization_loss(scales, 1e-4) == pytest.approx(
                reg_oracle(scales, 1e-4), rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            regularization_loss(np.zeros((0, 3)))

    def test_gradient_exact_in_linear_region(self, rng):
        loss, grad = regularization_with_gradient(KINK_FREE_SCALES, 1e-4)
        v = rng.normal(size=KINK_FREE_SCALES.shape)
        v /= np.abs(v).max()
        h = 1e-5
        fd = (regularization_loss(KINK_FREE_SCALES + h * v, 1e-4)
              - regularization_loss(KINK_FREE_SCALES - h * v, 1e-4)) / (2 * h)
        assert fd == pytest.approx(float((grad * v).sum()), rel=1e-6)


def output_like(color, depth):
    h, w = color.shape[:2]
    return RenderOutput(color=color, depth=depth, opacity=np.zeros((h, w)),
                        per_pixel_count=np.zeros((h, w), dtype=np.int64))


class TestMappingLoss:
    def test_perfect_render_is_zero(self, rng):
        color = rng.uniform(0.0, 1.0, size=(16, 16, 3))
        depth = rng.uniform(0.5, 3.0, size=(16, 16))
        frame = RgbdFrame(color, depth, 0.0, make_intrinsics(16, 16))
        # 0.25 keeps the batch mean exact, so the regularizer is exactly 0
        scales = np.tile([0.25, 0.25, 1e-4], (7, 1))
        total, parts, adjoint, g_scales = mapping_loss(
            output_like(color.copy(), depth.copy()), frame, scales)
        assert total == 0.0
        assert all(v == 0.0 for v in parts.values())
        # the SSIM backward leaves rounding dust even on identical images
        assert np.abs(adjoint.color).max() < 1e-12
        assert not adjoint.depth.any()
        assert not g_scales.any()

    def test_constant_offset_closed_form(self):
        c1, c2 = 0.01**2, 0.03**2
        gt = np.full((16, 16, 3), 0.3)
        frame = RgbdFrame(gt, np.zeros((16, 16)), 0.0, make_intrinsics(16, 16))
        out = output_like(np.full((16, 16, 3), 0.4), np.zeros((16, 16)))
        weights = LossWeights(color=0.8, depth=0.0, reg=0.0)
        total, _, _, _ = mapping_loss(out, frame, None, weights)
        ssim_const = (2 * 0.3 * 0.4 + c1) / (0.3**2 + 0.4**2 + c1)
        assert total == pytest.approx(0.8 * 0.1 + 0.2 * (1 - ssim_const), rel=1e-9)

    def test_invalid_depth_excluded(self):
        gt_d = np.zeros((16, 16))
        gt_d[:8] = 2.0  # bottom half invalid
        render_d = np.full((16, 16), 2.5)
        render_d[8:] = 99.0  # would dominate if the mask leaked
        gt_c = np.full((16, 16, 3), 0.5)
        frame = RgbdFrame(gt_c, gt_d, 0.0, make_intrinsics(16, 16))
        weights = LossWeights(color=1.0, depth=0.5, reg=0.0)
        total, parts, adjoint, _ = mapping_loss(
            output_like(gt_c.copy(), render_d), frame, None, weights)
        assert parts["depth"] == pytest.approx(0.5 * 0.5, abs=1e-12)
        assert total == pytest.approx(0.5 * 0.5, abs=1e-12)
        assert not adjoint.depth[8:].any()

    def test_adjoints_match_directional_derivatives(self, rng):
        h, w = 16, 20
        gt_color = rng.uniform(0.2, 0.8, size=(h, w, 3))
        sign_c = rng.choice([-1.0, 1.0], size=gt_color.shape)
        color = gt_color + sign_c * rng.uniform(0.02, 0.15, size=gt_color.shape)
        gt_depth = rng.uniform(1.0, 3.0, size=(h, w))
        gt_depth[rng.uniform(size=(h, w)) < 0.2] = 0.0
        depth = gt_depth + rng.choice([-1.0, 1.0], (h, w)) * rng.uniform(0.05, 0.3, (h, w))
        frame = RgbdFrame(gt_color, gt_depth, 0.0, make_intrinsics(w, h))

        def total_of(c, d, s):
            val, _, _, _ = mapping_loss(output_like(c, d), frame, s)
            return val

        base_args = (color, depth, KINK_FREE_SCALES)
        _, _, adjoint, g_scales = mapping_loss(
            output_like(color, depth), frame, KINK_FREE_SCALES)
        step = 1e-5
        vc = rng.normal(size=color.shape)
        fd = (total_of(color + step * vc, depth, KINK_FREE_SCALES)
              - total_of(color - step * vc, depth, KINK_FREE_SCALES)) / (2 * step)
        assert fd == pytest.approx(float((adjoint.color * vc).sum()), rel=1e-4)

        vd = rng.normal(size=depth.shape)
        fd = (total_of(color, depth + step * vd, KINK_FREE_SCALES)
              - total_of(color, depth - step * vd, KINK_FREE_SCALES)) / (2 * step)
        assert fd == pytest.approx(float((adjoint.depth * vd).sum()), rel=1e-4)

        vs = rng.normal(size=KINK_FREE_SCALES.shape)
        vs /= np.abs(vs).max()
        fd = (total_of(color, depth, KINK_FREE_SCALES + step * vs)
              - total_of(color, depth, KINK_FREE_SCALES - step * vs)) / (2 * step)
        assert fd == pytest.approx(float((g_scales * vs).sum()), rel=1e-4)

    def test_parts_sum_to_total(self, rng):
        color = rng.uniform(size=(16, 16, 3))
        depth = rng.uniform(0.5, 2.0, size=(16, 16))
        frame = RgbdFrame(rng.uniform(size=(16, 16, 3)), depth, 0.0,
                          make_intrinsics(16, 16))
        total, parts, _, _ = mapping_loss(output_like(color, depth), frame,
                                          KINK_FREE_SCALES)
        assert total == pytest.approx(sum(parts.values()), rel=1e-15)

    def test_dimension_mismatch(self, rng):
        frame = RgbdFrame(np.zeros((16, 16, 3)), np.ones((16, 16)), 0.0,
                          make_intrinsics(16, 16))
        with pytest.raises(ValueError):
            mapping_loss(output_like(np.zeros((16, 20, 3)), np.zeros((16, 20))),
                         frame, None)


def single_gaussian_map(color):
    gmap = GaussianMap(MapKind.DENSE)
    gmap.add(Gaussian(np.array([0.0, 0.0, 1.0]), np.array([0.5, 0.5, 0.5]),
                      np.array([1.0, 0.0, 0.0, 0.0]), 0.9, np.asarray(color),
                      FrequencyClass.HIGH))
    return gmap


def keyframe_for(gmap, index=0):
    intr = make_intrinsics(16, 16, f=30.0)
    shot = render(gmap, Pose.identity(), intr)
    frame = RgbdFrame(shot.color, np.ones((16, 16)), float(index), intr)
    return Keyframe(frame, Pose.identity(), KeyframeRole.TRACKING, index)


COLOR_ONLY = LossWeights(color=1.0, depth=0.0, reg=0.0)


class TestOptimizeMaps:
    def test_zero_iterations_leave_maps_alone(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        sparse = GaussianMap(MapKind.SPARSE)
        kf = keyframe_for(single_gaussian_map([0.5, 0.6, 0.7]))
        before = dense.copy()
        trace = optimize_maps(dense, sparse, [kf], [], 0)
        assert trace == []
        np.testing.assert_array_equal(dense.color, before.color)
        np.testing.assert_array_equal(dense.mu, before.mu)

    def test_empty_maps_are_a_no_op(self):
        kf = keyframe_for(single_gaussian_map([0.5, 0.6, 0.7]))
        trace = optimize_maps(GaussianMap(MapKind.DENSE),
                              GaussianMap(MapKind.SPARSE), [kf], [], 5)
        assert trace == []

    def test_empty_schedule_is_a_no_op(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        assert optimize_maps(dense, GaussianMap(MapKind.SPARSE), [], [], 5) == []

    def test_color_converges_to_observed_pixels(self):
        target = np.array([0.5, 0.6, 0.7])
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        kf = keyframe_for(single_gaussian_map(target))
        cfg = OptimizeConfig(lr_position=0.0, lr_scale=0.0, lr_rotation=0.0,
                             lr_opacity=0.0, weights=COLOR_ONLY)
        trace = optimize_maps(dense, GaussianMap(MapKind.SPARSE), [kf], [], 200, cfg)
        assert len(trace) == 200
        assert np.abs(dense.color[0] - target).max() < 1e-2
        assert trace[-1][2] < trace[0][2]

    def test_round_robin_emphasizes_covisible(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        kf_a = keyframe_for(single_gaussian_map([0.5, 0.6, 0.7]), index=4)
        kf_b = keyframe_for(single_gaussian_map([0.6, 0.5, 0.4]), index=9)
        cfg = OptimizeConfig(weights=COLOR_ONLY)
        trace = optimize_maps(dense, GaussianMap(MapKind.SPARSE),
                              [kf_a], [kf_b], 5, cfg)
        assert [row[1] for row in trace] == [4, 9, 4, 4, 9]
        assert [row[0] for row in trace] == [0, 1, 2, 3, 4]

    def test_sparse_geometry_frozen_appearance_updates(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        sparse = GaussianMap(MapKind.SPARSE)
        sparse.add(Gaussian(np.array([0.2, 0.1, 0.8]), np.array([0.2, 0.2, 0.02]),
                            np.array([1.0, 0.0, 0.0, 0.0]), 0.5,
                            np.array([0.9, 0.1, 0.1]), FrequencyClass.LOW))
        kf = keyframe_for(single_gaussian_map([0.7, 0.7, 0.7]))
        before = sparse.copy()
        trace = optimize_maps(dense, sparse, [kf], [], 4)
        assert len(trace) == 4
        np.testing.assert_array_equal(sparse.mu, before.mu)
        np.testing.assert_array_equal(sparse.scale, before.scale)
        np.testing.assert_array_equal(sparse.rotation, before.rotation)
        assert not np.array_equal(sparse.opacity, before.opacity)
        assert not np.array_equal(sparse.color, before.color)

    def test_trace_rows_are_consistent(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        kf = keyframe_for(single_gaussian_map([0.5, 0.6, 0.7]))
        trace = optimize_maps(dense, GaussianMap(MapKind.SPARSE), [kf], [], 3)
        for it, kf_index, total, c, d, s, r in trace:
            assert kf_index == 0
            assert total == pytest.approx(c + d + s + r, rel=1e-12)
            assert np.isfinite(total)

    def test_non_finite_loss_aborts_with_trace(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        kf = keyframe_for(single_gaussian_map([0.5, 0.6, 0.7]))
        kf.frame.color_image[3, 3, 0] = np.nan
        with pytest.raises(NumericalError) as err:
            optimize_maps(dense, GaussianMap(MapKind.SPARSE), [kf], [], 5)
        assert isinstance(err.value.trace, list)

    def test_opacity_stays_in_unit_interval(self):
        dense = single_gaussian_map([0.2, 0.3, 0.4])
        kf = keyframe_for(single_gaussian_map([0.9, 0.9, 0.9]))
        optimize_maps(dense, GaussianMap(MapKind.SPARSE), [kf], [], 10)
        assert np.all(dense.opacity > 0.0) and np.all(dense.opacity < 1.0)
        np.testing.assert_allclose(np.linalg.norm(dense.rotation, axis=1), 1.0,
                                   atol=1e-12)
