"""Adaptive gaussian spawning where the map under-represents the frame.

Three boolean masks drive spawning. The insufficient mask flags pixels the
map barely covers (low accumulated alpha). The depth mask flags pixels where
the observed surface sits significantly in front of what the map renders —
new foreground. The color mask flags covered pixels whose rendered color is
wrong. Their union gates where new gaussians may appear; the frequency masks
then pick per-region sampling density and radius: small tight gaussians in
high-frequency areas, large sparse ones in smooth areas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_opening

from .core import (FrequencyClass, Gaussian, GaussianMap, Pose, RgbdFrame,
                   matrix_to_quat)
from .frequency import FrequencyMasks, _lattice_points
from .renderer import RenderOutput

OPACITY_FLOOR = 1e-6  # alpha-normalization floor for the rendered depth


def _disc(radius: int) -> np.ndarray:
    """Boolean disc structuring element of the given pixel radius."""
    span = np.arange(-radius, radius + 1)
    return span[:, None] ** 2 + span[None, :] ** 2 <= radius ** 2


@dataclass
class DensifyConfig:
    opacity_threshold: float = 0.9
    depth_diff_threshold: float = 0.1  # meters
    color_diff_threshold: float = 0.1  # mean per-channel L1
    alpha_h: float = 1.0  # radius factor, high-frequency spawns
    alpha_l: float = 6.0  # radius factor, low-frequency spawns
    prune_scale_max: float = 0.5  # meters
    prune_opacity_min: float = 0.05
    spawn_opacity: float = 0.5
    flatten_ratio: float = 0.1  # third scale relative to the in-plane radius
    mode: str = "adaptive"  # adaptive | dense (all small) | sparse (all large)

    def __post_init__(self):
        if not self.alpha_h < self.alpha_l:
            raise ValueError("alpha_h must be smaller than alpha_l")
        for name in ("opacity_threshold", "depth_diff_threshold",
                     "color_diff_threshold", "alpha_h", "prune_scale_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("adaptive", "dense", "sparse"):
            raise ValueError("mode must be adaptive, dense, or sparse")


@dataclass
class MissingMasks:
    insufficient: np.ndarray  # M_i
    depth_mismatch: np.ndarray  # M_d
    color_mismatch: np.ndarray  # M_c
    combined: np.ndarray  # M_m = M_i | M_d | M_c


@dataclass
class PruneReport:
    removed_large: int
    removed_transparent: int
    remaining: int


def missing_masks(render: RenderOutput, frame: RgbdFrame,
                  cfg: DensifyConfig | None = None) -> MissingMasks:
    cfg = cfg or DensifyConfig()
    if render.opacity.shape != frame.depth_image.shape:
        raise ValueError(
            f"render {render.opacity.shape} does not match frame {frame.depth_image.shape}"
        )
    insufficient = render.opacity < cfg.opacity_threshold
    # the blended depth is alpha-weighted; normalize before comparing to the
    # observed surface so under-saturated pixels do not read as near
    rendered_depth = render.depth / np.maximum(render.opacity, OPACITY_FLOOR)
    valid = frame.depth_image > 0
    depth_mismatch = valid & (frame.depth_image + cfg.depth_diff_threshold < rendered_depth)
    color_err = np.abs(render.color - frame.color_image).mean(axis=2)
    color_mismatch = (color_err > cfg.color_diff_threshold) & ~insufficient
    return MissingMasks(
        insufficient=insufficient,
        depth_mismatch=depth_mismatch,
        color_mismatch=color_mismatch,
        combined=insufficient | depth_mismatch | color_mismatch,
    )


def spawn_gaussians(frame: RgbdFrame, pose: Pose, masks: FrequencyMasks,
                    missing: MissingMasks,
                    cfg: DensifyConfig | None = None) -> list[Gaussian]:
    """New gaussians at lattice samples of the missing regions, sized by the
    local frequency class (tight lattice and small radius over detail, wide
    lattice and large radius over smooth areas, a half-size band between).

    Each spawn back-projects its pixel through the depth map, takes radius
    alpha·d/fx for its class, and starts as a flattened disc facing the
    spawning camera at mid opacity. The camera-facing start matters: the
    radius rule sizes the disc to cover alpha pixels, which only holds when
    the disc plane is square to the view; a fixed world orientation leaves
    obliquely seen walls covered by slivers.
    """
    cfg = cfg or DensifyConfig()
    m, n = masks.high_spacing_m, masks.low_spacing_n
    color = frame.color_image
    if cfg.mode == "dense":  # every missing pixel sampled at the tight lattice
        groups = [(_lattice_points(missing.combined, m), cfg.alpha_h,
                   FrequencyClass.HIGH, color)]
    elif cfg.mode == "sparse":  # every missing pixel sampled at the wide one
        groups = [(_lattice_points(missing.combined, n), cfg.alpha_l,
                   FrequencyClass.LOW, _box_mean(color, n // 2))]
    else:
        # Wide splats bleed ~alpha_l px, so they keep that far inside the
        # low-frequency region. The boundary band in between is covered by
        # half-radius splats on a half-spacing lattice: still far cheaper
        # than the tight lattice, but small enough that their tails stay
        # out of neighbouring detail. Isolated high pixels are
        # classification noise and would each blow a full-radius hole in
        # the interior, so they are opened away first.
        solid_high = binary_opening(masks.high, _disc(1))
        near = binary_dilation(solid_high, _disc(int(np.ceil(cfg.alpha_l / 2))))
        far = binary_dilation(solid_high, _disc(int(np.ceil(cfg.alpha_l))))
        alpha_band = cfg.alpha_l / 2
        groups = [
            (_lattice_points(near & missing.combined, m),
             cfg.alpha_h, FrequencyClass.HIGH, color),
            (_lattice_points(far & ~near & missing.combined, n // 2),
             alpha_band, FrequencyClass.LOW, _box_mean(color, n // 4)),
            (_lattice_points(~far & missing.combined, n),
             cfg.alpha_l, FrequencyClass.LOW, _box_mean(color, n // 2)),
        ]
    intr = frame.intrinsics
    rot_wc = pose.rotation_matrix()
    facing = matrix_to_quat(rot_wc)  # disc normal along the optical axis
    spawned: list[Gaussian] = []
    # wide-lattice spawns stand in for their whole cell, so they get the
    # cell-mean color; tight-lattice spawns keep their own pixel
    for pts, factor, klass, colors in groups:
        for x, y in pts:
            d = frame.depth_image[y, x]
            if d <= 0:
                continue
            cam = np.array([(x - intr.cx) / intr.fx * d, (y - intr.cy) / intr.fy * d, d])
            r = factor * d / intr.fx
            spawned.append(Gaussian(
                mu=rot_wc @ cam + pose.translation,
                scale=np.array([r, r, cfg.flatten_ratio * r]),
                rotation=facing.copy(),
                opacity=cfg.spawn_opacity,
                color=colors[y, x].astype(np.float64),
                frequency_class=klass,
            ))
    return spawned


def _box_mean(image: np.ndarray, half: int) -> np.ndarray:
    """Mean of `image` over (2·half+1)-wide windows, clipped at the edges."""
    if half <= 0:
        return image
    h, w = image.shape[:2]
    acc = np.zeros((h + 1, w + 1) + image.shape[2:], dtype=np.float64)
    np.cumsum(np.cumsum(image, axis=0), axis=1, out=acc[1:, 1:])
    y0 = np.clip(np.arange(h) - half, 0, h)
    y1 = np.clip(np.arange(h) + half + 1, 0, h)
    x0 = np.clip(np.arange(w) - half, 0, w)
    x1 = np.clip(np.arange(w) + half + 1, 0, w)
    total = (acc[y1][:, x1] - acc[y1][:, x0] - acc[y0][:, x1] + acc[y0][:, x0])
    area = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return total / area.reshape(area.shape + (1,) * (image.ndim - 2))


def prune(gmap: GaussianMap, cfg: DensifyConfig | None = None) -> PruneReport:
    """Drop oversized or nearly transparent gaussians, compacting storage.

    A gaussian tripping both rules is counted under both.
    """
    cfg = cfg or DensifyConfig()
    if len(gmap) == 0:
        return PruneReport(0, 0, 0)
    large = gmap.scale.max(axis=1) > cfg.prune_scale_max
    transparent = gmap.opacity < cfg.prune_opacity_min
    keep = ~(large | transparent)
    report = PruneReport(
        removed_large=int(large.sum()),
        removed_transparent=int(transparent.sum()),
        remaining=int(keep.sum()),
    )
    gmap.keep(keep)
    return report


def export_masks(missing: MissingMasks, directory, frame_index: int) -> list:
    """Debug PNG dump of the four masks (white = flagged)."""
    import os

    from . import imgio

    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, mask in (
        ("mi", missing.insufficient),
        ("md", missing.depth_mismatch),
        ("mc", missing.color_mismatch),
        ("mm", missing.combined),
    ):
        path = os.path.join(str(directory), f"frame{frame_index:06d}_{name}.png")
        imgio.write_mask_png(mask, path)
        paths.append(path)
    return paths
