"""Missing-region masks, frequency-guided spawning, and pruning."""

import numpy as np
import pytest

from fgs.core import (
    CameraIntrinsics,
    FrequencyClass,
    GaussianMap,
    MapKind,
    Pose,
    RgbdFrame,
)
from fgs.densify import DensifyConfig, MissingMasks, missing_masks, prune, spawn_gaussians
from fgs.frequency import FrequencyMasks
from fgs.renderer import RenderOutput, render
from conftest import make_intrinsics, random_scene_map
from test_renderer import one_gaussian_map, render_oracle


def empty_render(intr):
    h, w = intr.height, intr.width
    return RenderOutput(
        color=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)),
        opacity=np.zeros((h, w)),
        per_pixel_count=np.zeros((h, w), dtype=np.int64),
    )


def wall_map(depth=3.0, opacity=0.95, color=(0.4, 0.5, 0.6)):
    """One huge flat gaussian: saturates opacity across a 64x64 frame."""
    return one_gaussian_map((0, 0, depth), scale=(50.0, 50.0, 0.01),
                            opacity=opacity, color=color)


def oracle_output(gmap, pose, intr):
    color, depth, opac = render_oracle(gmap, pose, intr)
    return RenderOutput(color=color, depth=depth, opacity=opac,
                        per_pixel_count=np.zeros((intr.height, intr.width), dtype=np.int64))


def frame_like(render_out, intr, depth=None, color=None):
    d = render_out.depth / np.maximum(render_out.opacity, 1e-6) if depth is None else depth
    c = render_out.color if color is None else color
    return RgbdFrame(np.array(c, dtype=np.float64), np.array(d, dtype=np.float64),
                     0.0, intr)


def full_masks(intr, high=True, m=2, n=8):
    shape = (intr.height, intr.width)
    h = np.full(shape, high)
    return FrequencyMasks(high=h, low=~h, threshold=0.0,
                          high_spacing_m=m, low_spacing_n=n)


class TestMissingMasks:
    def test_empty_map_everything_missing(self, rng):
        intr = make_intrinsics()
        frame = frame_like(empty_render(intr), intr,
                           depth=np.full((64, 64), 2.0),
                           color=rng.uniform(size=(64, 64, 3)))
        masks = missing_masks(empty_render(intr), frame)
        assert masks.insufficient.all()
        assert masks.combined.all()

    def test_perfect_render_no_masks(self):
        intr = make_intrinsics()
        out = render(wall_map(), Pose.identity(), intr)
        masks = missing_masks(out, frame_like(out, intr))
        assert not masks.insufficient.any()
        assert not masks.depth_mismatch.any()
        assert not masks.color_mismatch.any()
        assert not masks.combined.any()

    def test_new_foreground_object_flags_depth_mask(self):
        # map wall at 3 m; the frame sees a new object at 1 m in a 20x20 block
        intr = make_intrinsics()
        out = oracle_output(wall_map(depth=3.0), Pose.identity(), intr)
        depth = np.full((64, 64), 3.0)
        region = np.zeros((64, 64), dtype=bool)
        region[20:40, 10:30] = True
        depth[region] = 1.0
        frame = frame_like(out, intr, depth=depth)
        cfg = DensifyConfig(depth_diff_threshold=0.5, color_diff_threshold=0.1)
        masks = missing_masks(out, frame, cfg)
        np.testing.assert_array_equal(masks.depth_mismatch, region)
        assert not masks.insufficient.any()
        assert not masks.color_mismatch.any()
        np.testing.assert_array_equal(masks.combined, region)

    def test_depth_mask_is_one_sided(self):
        # observed surface BEHIND the map does not flag the depth mask
        intr = make_intrinsics()
        out = oracle_output(wall_map(depth=3.0), Pose.identity(), intr)
        frame = frame_like(out, intr, depth=np.full((64, 64), 5.0))
        masks = missing_masks(out, frame)
        assert not masks.depth_mismatch.any()

    def test_invalid_depth_never_flags_depth_mask(self):
        intr = make_intrinsics()
        out = oracle_output(wall_map(depth=3.0), Pose.identity(), intr)
        frame = frame_like(out, intr, depth=np.zeros((64, 64)))
        masks = missing_masks(out, frame)
        assert not masks.depth_mismatch.any()

    def test_color_mismatch_excludes_insufficient(self):
        intr = make_intrinsics()
        out = render(wall_map(), Pose.identity(), intr)
        color = out.color.copy()
        color[5:15, 5:15] += 0.3  # wrong color block on a covered region
        frame = frame_like(out, intr, color=np.clip(color, 0, 1))
        masks = missing_masks(out, frame)
        block = np.zeros((64, 64), dtype=bool)
        block[5:15, 5:15] = True
        np.testing.assert_array_equal(masks.color_mismatch, block)
        # same color error under an uncovered map must land in M_i, not M_c
        masks_uncovered = missing_masks(empty_render(intr), frame)
        assert not masks_uncovered.color_mismatch.any()
        assert masks_uncovered.insufficient.all()

    def test_combined_is_exact_union(self, rng):
        intr = make_intrinsics()
        out = render(wall_map(), Pose.identity(), intr)
        depth = out.depth / np.maximum(out.opacity, 1e-6)
        depth[0:10, 0:10] = 0.5
        color = out.color.copy()
        color[30:40, 30:40] = 0.0
        masks = missing_masks(out, frame_like(out, intr, depth=depth, color=color))
        np.testing.assert_array_equal(
            masks.combined,
            masks.insufficient | masks.depth_mismatch | masks.color_mismatch,
        )
        assert masks.depth_mismatch.any() and masks.color_mismatch.any()

    def test_dimension_mismatch_rejected(self):
        intr = make_intrinsics()
        small = make_intrinsics(32, 32)
        frame = frame_like(empty_render(small), small, depth=np.ones((32, 32)),
                           color=np.zeros((32, 32, 3)))
        with pytest.raises(ValueError):
            missing_masks(empty_render(intr), frame)


class TestSpawn:
    def test_empty_missing_spawns_nothing(self, rng):
        intr = make_intrinsics()
        frame = frame_like(empty_render(intr), intr, depth=np.full((64, 64), 2.0),
                           color=rng.uniform(size=(64, 64, 3)))
        shape = (64, 64)
        missing = MissingMasks(*(np.zeros(shape, dtype=bool),) * 4)
        assert spawn_gaussians(frame, Pose.identity(), full_masks(intr), missing) == []

    def test_single_pixel_at_principal_point(self):
        intr = CameraIntrinsics(fx=500.0, fy=500.0, cx=32, cy=32, width=64, height=64)
        color = np.zeros((64, 64, 3))
        color[32, 32] = [0.1, 0.7, 0.3]
        frame = RgbdFrame(color, np.full((64, 64), 2.0), 0.0, intr)
        point = np.zeros((64, 64), dtype=bool)
        point[32, 32] = True
        masks = FrequencyMasks(high=point.copy(), low=~point, threshold=0.0,
                               high_spacing_m=2, low_spacing_n=8)
        missing = MissingMasks(point.copy(), np.zeros_like(point),
                               np.zeros_like(point), point.copy())
        cfg = DensifyConfig(alpha_h=1.0, alpha_l=2.0)
        spawned = spawn_gaussians(frame, Pose.identity(), masks, missing, cfg)
        assert len(spawned) == 1
        g = spawned[0]
        np.testing.assert_allclose(g.mu, [0.0, 0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(g.scale, [0.004, 0.004, 0.0004], rtol=1e-12)
        np.testing.assert_allclose(g.rotation, [1, 0, 0, 0])
        assert g.opacity == 0.5
        np.testing.assert_allclose(g.color, [0.1, 0.7, 0.3])
        assert g.frequency_class == FrequencyClass.HIGH

    def test_counts_match_lattice_oracle(self, rng):
        intr = make_intrinsics()
        high = np.zeros((64, 64), dtype=bool)
        high[:, :32] = True
        masks = FrequencyMasks(high=high, low=~high, threshold=0.0,
                               high_spacing_m=2, low_spacing_n=8)
        frame = frame_like(empty_render(intr), intr, depth=np.full((64, 64), 2.0),
                           color=rng.uniform(size=(64, 64, 3)))
        missing = MissingMasks(*(np.ones((64, 64), dtype=bool),) * 4)
        spawned = spawn_gaussians(frame, Pose.identity(), masks, missing)
        n_high = sum(1 for g in spawned if g.frequency_class == FrequencyClass.HIGH)
        n_low = len(spawned) - n_high
        expect_high = sum(
            1 for y in range(0, 64, 2) for x in range(0, 64, 2) if high[y, x]
        )
        expect_low = sum(
            1 for y in range(0, 64, 8) for x in range(0, 64, 8) if not high[y, x]
        )
        assert n_high == expect_high
        assert n_low == expect_low
        # equal halves: count ratio is (n/m)^2
        assert n_high == n_low * (8 // 2) ** 2

    def test_invalid_depth_pixels_skipped(self, rng):
        intr = make_intrinsics()
        depth = np.full((64, 64), 2.0)
        depth[:32] = 0.0  # top half has no depth
        frame = frame_like(empty_render(intr), intr, depth=depth,
                           color=rng.uniform(size=(64, 64, 3)))
        missing = MissingMasks(*(np.ones((64, 64), dtype=bool),) * 4)
        spawned = spawn_gaussians(frame, Pose.identity(), full_masks(intr), missing)
        expected = sum(1 for y in range(0, 64, 2) for x in range(0, 64, 2) if y >= 32)
        assert len(spawned) == expected

    def test_spawn_pixels_respect_masks(self, rng):
        # every spawn reprojects onto a missing-mask pixel in exactly one class
        intr = make_intrinsics()
        pose = Pose(np.array([0.9, 0.1, -0.2, 0.4]) / np.linalg.norm([0.9, 0.1, -0.2, 0.4]),
                    np.array([0.3, -0.2, 0.1]))
        high = rng.uniform(size=(64, 64)) < 0.5
        masks = FrequencyMasks(high=high, low=~high, threshold=0.0,
                               high_spacing_m=2, low_spacing_n=4)
        combined = rng.uniform(size=(64, 64)) < 0.4
        missing = MissingMasks(combined.copy(), np.zeros_like(combined),
                               np.zeros_like(combined), combined)
        frame = frame_like(empty_render(intr), intr,
                           depth=rng.uniform(1.0, 3.0, size=(64, 64)),
                           color=rng.uniform(size=(64, 64, 3)))
        spawned = spawn_gaussians(frame, pose, masks, missing)
        assert spawned
        r_cw = pose.rotation_matrix().T
        for g in spawned:
            cam = r_cw @ (g.mu - pose.translation)
            px = intr.fx * cam[0] / cam[2] + intr.cx
            py = intr.fy * cam[1] / cam[2] + intr.cy
            x, y = round(px), round(py)
            assert abs(px - x) < 1e-9 and abs(py - y) < 1e-9
            assert missing.combined[y, x]
            assert masks.high[y, x] == (g.frequency_class == FrequencyClass.HIGH)
            assert masks.low[y, x] == (g.frequency_class == FrequencyClass.LOW)

    def test_high_radius_below_low_radius_at_equal_depth(self, rng):
        intr = make_intrinsics()
        high = np.zeros((64, 64), dtype=bool)
        high[:, :32] = True
        masks = FrequencyMasks(high=high, low=~high, threshold=0.0,
                               high_spacing_m=2, low_spacing_n=8)
        frame = frame_like(empty_render(intr), intr, depth=np.full((64, 64), 2.0),
                           color=rng.uniform(size=(64, 64, 3)))
        missing = MissingMasks(*(np.ones((64, 64), dtype=bool),) * 4)
        spawned = spawn_gaussians(frame, Pose.identity(), masks, missing)
        high_r = [g.scale.max() for g in spawned if g.frequency_class == FrequencyClass.HIGH]
        low_r = [g.scale.max() for g in spawned if g.frequency_class == FrequencyClass.LOW]
        assert max(high_r) < min(low_r)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            DensifyConfig(alpha_h=2.0, alpha_l=0.5)
        with pytest.raises(ValueError):
            DensifyConfig(depth_diff_threshold=-1.0)


class TestPrune:
    def test_all_within_bounds_unchanged(self, rng):
        intr = make_intrinsics()
        gmap = random_scene_map(rng, 40, intr)
        before = gmap.mu.copy()
        report = prune(gmap)
        assert report.removed_large == 0
        assert report.removed_transparent == 0
        assert report.remaining == 40
        np.testing.assert_array_equal(gmap.mu, before)

    def test_transparent_gaussian_removed(self, rng):
        intr = make_intrinsics()
        gmap = random_scene_map(rng, 5, intr)
        gmap.opacity[2] = 0.0
        survivor_mu = gmap.mu[[0, 1, 3, 4]].copy()
        report = prune(gmap)
        assert report.removed_transparent == 1
        assert report.removed_large == 0
        assert len(gmap) == 4
        np.testing.assert_array_equal(gmap.mu, survivor_mu)

    def test_oversized_gaussian_removed(self, rng):
        intr = make_intrinsics()
        gmap = random_scene_map(rng, 5, intr)
        gmap.scale[1, 0] = 0.6
        report = prune(gmap)
        assert report.removed_large == 1
        assert len(gmap) == 4

    def test_random_thresholds_match_filter_predicate(self, rng):
        intr = make_intrinsics()
        for _ in range(20):
            gmap = random_scene_map(rng, 50, intr, opacity_range=(0.0, 1.0),
                                    scale_range=(0.01, 1.0))
            cfg = DensifyConfig(prune_scale_max=float(rng.uniform(0.2, 0.8)),
                                prune_opacity_min=float(rng.uniform(0.0, 0.5)))
            expect = (gmap.scale.max(axis=1) <= cfg.prune_scale_max) \
                & (gmap.opacity >= cfg.prune_opacity_min)
            expected_mu = gmap.mu[expect].copy()
            report = prune(gmap, cfg)
            assert report.remaining == expect.sum()
            np.testing.assert_array_equal(gmap.mu, expected_mu)

    def test_empty_map(self):
        report = prune(GaussianMap(MapKind.DENSE))
        assert report.remaining == 0
