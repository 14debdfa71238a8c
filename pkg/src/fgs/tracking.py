"""Camera tracking: generalized ICP of frame point clouds against the sparse map.

Each downsampled frame point and each sparse-map gaussian carries a 3x3
covariance modeling its local surface patch. Registration minimizes the
Mahalanobis residual sum

    sum_i d_i^T (C_q^i + R C_p^i R^T)^{-1} d_i,   d_i = q_i - T p_i

by Gauss-Newton on the SE(3) tangent, with step halving when a step would
increase the objective on the iteration's correspondence set. The sparse map
doubles as the registration target directly: target covariances come from
the gaussians' own scale/rotation, so tracking and rendering share one
surface model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    GaussianMap,
    Pose,
    RgbdFrame,
    FrequencyClass,
    matrix_to_quat,
    quats_to_matrices,
    rotation_exp,
)
from .errors import InsufficientData, NumericalError, TrackingDivergence

PLANE_FLATTEN = 1e-3  # smallest regularized eigenvalue relative to the plane spread


@dataclass
class TrackConfig:
    voxel_size: float = 0.05  # meters
    knn: int = 10
    max_corr_dist: float = 0.3  # meters
    max_iterations: int = 30
    step_tolerance: float = 1e-6
    min_correspondences: int = 10
    max_step_halvings: int = 8
    overlap_dist: float = 0.1  # meters, permissible distance for overlap_ratio


@dataclass
class TrackedCloud:
    points: np.ndarray  # (n,3) frame-local
    covariances: np.ndarray  # (n,3,3) frame-local, plane-regularized

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class TrackResult:
    pose: Pose
    iterations: int
    final_cost: float
    converged: bool
    inlier_fraction: float
    cost_trace: list = field(default_factory=list)  # (before, after) per accepted step


def regularize_covariances(cov: np.ndarray,
                           max_tangential_var: float | None = None) -> np.ndarray:
    """Flatten each covariance to the GICP plane model.

    Eigenvalues are replaced by (PLANE_FLATTEN*t, t, t) with t the mean of
    the two largest, keeping the fitted normal direction. When given,
    max_tangential_var caps t: the knn ring spans several voxels, and the
    uncapped spread would overstate the surface patch one downsampled point
    represents (these covariances double as the render footprints of
    sparse-map gaussians).
    """
    vals, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    t = np.maximum(vals[:, 1:].mean(axis=1), 1e-12)
    if max_tangential_var is not None:
        t = np.minimum(t, max_tangential_var)
    new_vals = np.stack([PLANE_FLATTEN * t, t, t], axis=1)
    return np.einsum("nij,nj,nkj->nik", vecs, new_vals, vecs)


def backproject(frame: RgbdFrame) -> np.ndarray:
    """Camera-frame points of all valid-depth pixels, row-major order."""
    intr = frame.intrinsics
    ys, xs = np.nonzero(frame.depth_image > 0)
    d = frame.depth_image[ys, xs]
    return np.stack(
        [(xs - intr.cx) / intr.fx * d, (ys - intr.cy) / intr.fy * d, d], axis=1
    )


def voxel_downsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """One centroid per occupied voxel, in lexicographic voxel-key order."""
    keys = np.floor(points / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, points)
    return sums / np.bincount(inverse)[:, None]


def build_cloud(frame: RgbdFrame, voxel_size: float = 0.05, knn: int = 10) -> TrackedCloud:
    points = backproject(frame)
    if points.shape[0] < knn:
        raise InsufficientData(
            f"{points.shape[0]} valid depth pixels, need at least {knn}"
        )
    centers = voxel_downsample(points, voxel_size)
    if centers.shape[0] < knn:
        raise InsufficientData(
            f"{centers.shape[0]} downsampled points, need at least {knn}"
        )
    _, idx = cKDTree(centers).query(centers, k=knn)
    neigh = centers[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / knn
    cap = (0.5 * voxel_size) ** 2
    return TrackedCloud(points=centers, covariances=regularize_covariances(cov, cap))


def map_covariances(gmap: GaussianMap) -> np.ndarray:
    """World-frame covariances R diag(scale^2) R^T of every gaussian."""
    rot = quats_to_matrices(gmap.rotation / np.linalg.norm(gmap.rotation, axis=1, keepdims=True))
    return np.einsum("nij,nj,nkj->nik", rot, gmap.scale**2, rot)


def _pair_cost(target_mu, target_cov, src_pts, src_cov, pose: Pose):
    """Residuals, information matrices, and Mahalanobis cost for fixed pairs."""
    rot = pose.rotation_matrix()
    x = src_pts @ rot.T + pose.translation
    d = target_mu - x
    combined = target_cov + np.einsum("ij,njk,lk->nil", rot, src_cov, rot)
    info = np.linalg.inv(combined)
    cost = float(np.einsum("ni,nij,nj->", d, info, d))
    return x, d, info, cost


def gicp_align(source: TrackedCloud, target: GaussianMap, initial: Pose,
               cfg: TrackConfig | None = None) -> TrackResult:
    cfg = cfg or TrackConfig()
    if len(target) < cfg.min_correspondences:
        raise TrackingDivergence(
            f"target map has {len(target)} gaussians, need {cfg.min_correspondences}",
            pose=initial,
        )
    if len(source) == 0:
        raise InsufficientData("empty source cloud")
    target_cov_all = map_covariances(target)
    tree = cKDTree(target.mu)

    pose = initial
    cost = float("inf")
    trace: list = []
    iterations = 0
    converged = False
    inlier_fraction = 0.0
    for _ in range(cfg.max_iterations):
        rot = pose.rotation_matrix()
        x_world = source.points @ rot.T + pose.translation
        dist, j = tree.query(x_world, distance_upper_bound=cfg.max_corr_dist)
        ok = j < len(target)
        n_ok = int(ok.sum())
        if n_ok < cfg.min_correspondences:
            raise TrackingDivergence(
                f"{n_ok} correspondences within {cfg.max_corr_dist} m", pose=pose
            )
        inlier_fraction = n_ok / len(source)
        t_mu = target.mu[j[ok]]
        t_cov = target_cov_all[j[ok]]
        s_pts = source.points[ok]
        s_cov = source.covariances[ok]

        x, d, info, before = _pair_cost(t_mu, t_cov, s_pts, s_cov, pose)
        cost = before
        if not np.isfinite(cost):
            raise NumericalError(f"non-finite registration cost {cost}")
        # d(xi) = d + [x]x w - rho for the left perturbation (Exp(w), rho) o T
        a_mat = np.empty((x.shape[0], 3, 6))
        a_mat[:, :, :3] = skew_batch(x)
        a_mat[:, :, 3:] = -np.eye(3)
        h = np.einsum("nai,nab,nbj->ij", a_mat, info, a_mat)
        b = -np.einsum("nai,nab,nb->i", a_mat, info, d)
        h[np.diag_indices(6)] += 1e-10 * (np.trace(h) / 6.0 + 1.0)
        try:
            step = np.linalg.solve(h, b)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular normal equations: {exc}") from exc

        accepted = None
        for _halving in range(cfg.max_step_halvings + 1):
            candidate = _apply_step(pose, step)
            _, _, _, new_cost = _pair_cost(t_mu, t_cov, s_pts, s_cov, candidate)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = (candidate, new_cost)
                break
            step = 0.5 * step
        if accepted is None:
            converged = True  # no descent along the GN direction
            break
        pose, cost = accepted
        iterations += 1
        trace.append((before, cost))
        if np.linalg.norm(step) < cfg.step_tolerance:
            converged = True
            break
    return TrackResult(
        pose=pose,
        iterations=iterations,
        final_cost=cost if np.isfinite(cost) else 0.0,
        converged=converged,
        inlier_fraction=inlier_fraction,
        cost_trace=trace,
    )


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _apply_step(pose: Pose, step: np.ndarray) -> Pose:
    """Left-multiply the increment (Exp(w), rho) onto the current pose."""
    delta_rot = rotation_exp(step[:3])
    rot = delta_rot @ pose.rotation_matrix()
    trans = delta_rot @ pose.translation + step[3:]
    return Pose(matrix_to_quat(rot), trans)


def update_sparse_map(smap: GaussianMap, cloud: TrackedCloud, pose: Pose,
                      missing, frame: RgbdFrame, opacity: float = 0.5) -> int:
    """Insert cloud points landing in the missing mask as sparse gaussians.

    Shape comes straight from the tracked covariance (scale = sqrt of
    eigenvalues, rotation = eigenvectors carried to world frame); appearance
    from the source pixel.
    """
    if len(cloud) == 0:
        return 0
    intr = frame.intrinsics
    pts = cloud.points
    xi = np.rint(intr.fx * pts[:, 0] / pts[:, 2] + intr.cx).astype(np.int64)
    yi = np.rint(intr.fy * pts[:, 1] / pts[:, 2] + intr.cy).astype(np.int64)
    inb = (xi >= 0) & (xi < intr.width) & (yi >= 0) & (yi < intr.height)
    sel = inb.copy()
    sel[inb] = missing.combined[yi[inb], xi[inb]]
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        return 0

    vals, vecs = np.linalg.eigh(cloud.covariances[idx])
    scale = np.sqrt(np.maximum(vals, 1e-16))
    rot_wc = pose.rotation_matrix()
    frames = np.einsum("ij,njk->nik", rot_wc, vecs)
    flip = np.linalg.det(frames) < 0
    frames[flip, :, 2] *= -1.0
    quats = np.stack([matrix_to_quat(m) for m in frames])
    smap.add_arrays(
        mu=pts[idx] @ rot_wc.T + pose.translation,
        scale=scale,
        rotation=quats,
        opacity=np.full(idx.size, opacity),
        color=frame.color_image[yi[idx], xi[idx]],
        frequency_class=np.full(idx.size, int(FrequencyClass.LOW), dtype=np.uint8),
    )
    return int(idx.size)


def transform_cloud_points(cloud: TrackedCloud, pose: Pose) -> np.ndarray:
    """Cloud points carried from camera frame to world frame."""
    return cloud.points @ pose.rotation_matrix().T + pose.translation


def overlap_ratio(cloud: TrackedCloud, pose: Pose, gmap: GaussianMap,
                  dist: float = 0.1) -> float:
    """Fraction of cloud points with a map gaussian mean within dist."""
    if len(cloud) == 0:
        raise InsufficientData("empty cloud")
    if len(gmap) == 0:
        return 0.0
    world = cloud.points @ pose.rotation_matrix().T + pose.translation
    d, _ = cKDTree(gmap.mu).query(world, distance_upper_bound=dist)
    return float(np.isfinite(d).mean())


def track_log_line(frame_index: int, timestamp: float, result: TrackResult) -> str:
    """Per-frame log: index, iterations, cost, inliers, pose as a TUM line."""
    q = result.pose.rotation
    t = result.pose.translation
    return (
        f"frame {frame_index} iters {result.iterations} cost {result.final_cost:.6e} "
        f"inliers {result.inlier_fraction:.3f} pose {timestamp:.6f} "
        f"{t[0]:.6f} {t[1]:.6f} {t[2]:.6f} {q[1]:.6f} {q[2]:.6f} {q[3]:.6f} {q[0]:.6f}"
    )
