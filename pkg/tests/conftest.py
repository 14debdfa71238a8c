"""Shared generators for randomized tests. Everything is seeded."""

import numpy as np
import pytest

from fgs.core import CameraIntrinsics, GaussianMap, MapKind, Pose, quat_from_axis_angle


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_pose(rng, translation_scale=1.0):
    return Pose(random_unit_quat(rng), rng.normal(scale=translation_scale, size=3))


def small_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    return quat_from_axis_angle(axis, rng.uniform(-max_angle, max_angle))


def make_intrinsics(width=64, height=64, f=60.0):
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


def random_scene_map(rng, n, intr, z_range=(1.5, 3.5), opacity_range=(0.2, 0.8),
                     scale_range=(0.01, 0.08)):
    """Random gaussians placed inside the camera frustum of an identity pose."""
    # stratified depths: guaranteed pairwise gaps so finite-difference nudges
    # and permutation tests never sit on a sort-order boundary
    lo, hi = z_range
    strata = lo + (np.arange(n) + rng.uniform(0.2, 0.8, size=n)) * (hi - lo) / n
    z = rng.permutation(strata)
    # keep means well inside the image so culling never borders on flipping
    px = rng.uniform(intr.width * 0.15, intr.width * 0.85, size=n)
    py = rng.uniform(intr.height * 0.15, intr.height * 0.85, size=n)
    x = (px - intr.cx) / intr.fx * z
    y = (py - intr.cy) / intr.fy * z
    gmap = GaussianMap(MapKind.DENSE)
    gmap.add_arrays(
        mu=np.stack([x, y, z], axis=1),
        scale=rng.uniform(*scale_range, size=(n, 3)),
        rotation=np.stack([random_unit_quat(rng) for _ in range(n)]),
        opacity=rng.uniform(*opacity_range, size=n),
        color=rng.uniform(0.05, 0.95, size=(n, 3)),
        frequency_class=rng.integers(0, 2, size=n).astype(np.uint8),
    )
    return gmap


def plane_corner_cloud(rng, n=1000, extent=1.0, tangential_var=2.5e-3):
    """Points on three orthogonal unit squares meeting at the origin corner,
    each with a plane-regularized covariance (normal = plane axis)."""
    per_plane = n // 3
    counts = [per_plane, per_plane, n - 2 * per_plane]
    points, covs = [], []
    eye = np.eye(3)
    for axis, count in enumerate(counts):
        uv = rng.uniform(0.0, extent, size=(count, 2))
        p = np.zeros((count, 3))
        p[:, (axis + 1) % 3] = uv[:, 0]
        p[:, (axis + 2) % 3] = uv[:, 1]
        n_vec = eye[axis]
        cov = tangential_var * (eye - np.outer(n_vec, n_vec)) \
            + 1e-3 * tangential_var * np.outer(n_vec, n_vec)
        points.append(p)
        covs.append(np.broadcast_to(cov, (count, 3, 3)))
    return np.concatenate(points), np.concatenate(covs).copy()


def map_from_cloud(points, covariances, kind=None):
    """Gaussian map whose means/covariances equal the given cloud's."""
    from fgs.core import GaussianMap, MapKind, matrix_to_quat

    vals, vecs = np.linalg.eigh(covariances)
    flip = np.linalg.det(vecs) < 0
    vecs[flip, :, 2] *= -1.0
    gmap = GaussianMap(kind or MapKind.SPARSE)
    gmap.add_arrays(
        mu=np.array(points, dtype=np.float64),
        scale=np.sqrt(np.maximum(vals, 1e-16)),
        rotation=np.stack([matrix_to_quat(m) for m in vecs]),
        opacity=np.full(len(points), 0.5),
        color=np.full((len(points), 3), 0.5),
        frequency_class=np.zeros(len(points), dtype=np.uint8),
    )
    return gmap


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
