"""CPU tile rasterizer for 3D gaussians with analytic reverse-mode gradients.

Forward model per pixel p (front-to-back over depth-sorted gaussians):

    a_i(p) = min(opacity_i * exp(-1/2 d^T cov2d_i^{-1} d), alpha_clamp),  d = p - mean2d_i
    F(p)   = sum_i gamma_i a_i(p) prod_{j<i} (1 - a_j(p))

with gamma = color / camera-frame depth / 1 for the three output images, and
accumulation stopping once transmittance drops below transmittance_stop.
Projection is the EWA approximation: cov2d = J W C W^T J^T + 0.3 I with
W the world-to-camera rotation and J the pinhole Jacobian at the mean.

The backward pass returns exact adjoints of this forward computation for
mu, scale, rotation (through quaternion normalization), opacity, and color.
Tile lists use per-gaussian extinction radii (alpha below 1e-12 outside),
so tiling is invisible at 1e-6 against an untiled evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, GaussianMap, Gaussian, Pose, quats_to_matrices

ALPHA_TILE_CUTOFF = 1e-12
COV2D_REG = 0.3


@dataclass
class RenderConfig:
    tile_size: int = 16
    alpha_clamp: float = 0.99
    transmittance_stop: float = 1e-4
    near_clip: float = 0.01
    cull_margin: float = 1.5  # frame diagonals outside bounds before culling


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int


@dataclass
class RenderOutput:
    color: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, alpha-weighted depth sum
    opacity: np.ndarray  # H x W accumulated alpha
    per_pixel_count: np.ndarray  # H x W int, gaussians blended


@dataclass
class RenderAdjoint:
    """d(loss)/d(render output); any image may be omitted."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    opacity: np.ndarray | None = None


@dataclass
class MapGradients:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


@dataclass
class _Projection:
    """Per-gaussian projection intermediates for the kept (unculled) subset."""

    idx: np.ndarray  # indices into the source arrays
    t_cam: np.ndarray  # (k,3)
    mean2d: np.ndarray  # (k,2)
    depth: np.ndarray  # (k,)
    conic: np.ndarray  # (k,3) upper triangle (A, B, C) of cov2d^{-1}
    radius: np.ndarray  # (k,) extinction radius in pixels
    opacity: np.ndarray
    color: np.ndarray
    # backward intermediates
    j_cam: np.ndarray  # (k,2,3) pinhole jacobians
    a_cam: np.ndarray  # (k,3,3) W C W^T
    rot_mat: np.ndarray  # (k,3,3) gaussian rotations (normalized quats)
    q_hat: np.ndarray  # (k,4) normalized quaternions
    q_norm: np.ndarray  # (k,) original quaternion norms
    scale: np.ndarray  # (k,3)
    w_cam: np.ndarray  # (3,3) world-to-camera rotation


def _project(mu, scale, rotation, opacity, color, pose: Pose, intr: CameraIntrinsics,
             cfg: RenderConfig) -> _Projection:
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    n = mu.shape[0]
    r_wc = pose.rotation_matrix()
    w_cam = r_wc.T
    t_cam = (mu - pose.translation) @ r_wc
    keep = t_cam[:, 2] > cfg.near_clip

    tz = np.where(keep, t_cam[:, 2], 1.0)
    x2d = intr.fx * t_cam[:, 0] / tz + intr.cx
    y2d = intr.fy * t_cam[:, 1] / tz + intr.cy
    margin = cfg.cull_margin * np.hypot(intr.width, intr.height)
    keep &= (x2d >= -margin) & (x2d <= intr.width - 1 + margin)
    keep &= (y2d >= -margin) & (y2d <= intr.height - 1 + margin)

    idx = np.nonzero(keep)[0]
    t_cam = t_cam[idx]
    scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))[idx]
    rotation = np.atleast_2d(np.asarray(rotation, dtype=np.float64))[idx]
    opacity = np.asarray(opacity, dtype=np.float64).reshape(-1)[idx]
    color = np.atleast_2d(np.asarray(color, dtype=np.float64))[idx]

    q_norm = np.linalg.norm(rotation, axis=1)
    q_hat = rotation / q_norm[:, None]
    rot_mat = quats_to_matrices(q_hat)
    cov3 = np.einsum("nij,nj,nkj->nik", rot_mat, scale**2, rot_mat)
    a_cam = np.einsum("ij,njk,lk->nil", w_cam, cov3, w_cam)

    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    k = idx.size
    j_cam = np.zeros((k, 2, 3))
    j_cam[:, 0, 0] = intr.fx / tz
    j_cam[:, 0, 2] = -intr.fx * tx / tz**2
    j_cam[:, 1, 1] = intr.fy / tz
    j_cam[:, 1, 2] = -intr.fy * ty / tz**2

    cov2d = np.einsum("nij,njk,nlk->nil", j_cam, a_cam, j_cam)
    cov2d[:, 0, 0] += COV2D_REG
    cov2d[:, 1, 1] += COV2D_REG
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = 2.0 * np.log(opacity / ALPHA_TILE_CUTOFF)
    radius = np.sqrt(np.maximum(reach, 0.0) * lam_max)
    radius[opacity <= ALPHA_TILE_CUTOFF] = 0.0

    return _Projection(
        idx=idx,
        t_cam=t_cam,
        mean2d=np.stack([intr.fx * tx / tz + intr.cx, intr.fy * ty / tz + intr.cy], axis=1),
        depth=tz.copy(),
        conic=conic,
        radius=radius,
        opacity=opacity,
        color=color,
        j_cam=j_cam,
        a_cam=a_cam,
        rot_mat=rot_mat,
        q_hat=q_hat,
        q_norm=q_norm,
        scale=scale,
        w_cam=w_cam,
    )



def project_gaussian(g: Gaussian, camera_pose: Pose, intr: CameraIntrinsics,
                     cfg: RenderConfig | None = None) -> ProjectedGaussian | None:
    """EWA-project one gaussian; None when culled (behind camera / far outside)."""
    cfg = cfg or RenderConfig()
    proj = _project(
        g.mu[None], g.scale[None], g.rotation[None], np.array([g.opacity]),
        g.color[None], camera_pose, intr, cfg,
    )
    if proj.idx.size == 0:
        return None
    conic = np.array(
        [[proj.conic[0, 0], proj.conic[0, 1]], [proj.conic[0, 1], proj.conic[0, 2]]]
    )
    return ProjectedGaussian(
        mean2d=proj.mean2d[0],
        cov2d=np.linalg.inv(conic),
        depth=float(proj.depth[0]),
        opacity=float(proj.opacity[0]),
        color=proj.color[0].copy(),
        source_index=0,
    )


def _depth_order(proj: _Projection) -> np.ndarray:
    """Rank of each kept gaussian in the global front-to-back order."""
    order = np.lexsort((proj.idx, proj.depth))
    rank = np.empty(proj.idx.size, dtype=np.int64)
    rank[order] = np.arange(proj.idx.size)
    return rank


def _tile_instances(proj: _Projection, intr: CameraIntrinsics, cfg: RenderConfig):
    """(tile_id, kept-gaussian row) instance lists sorted by tile then depth rank."""
    ts = cfg.tile_size
    ntx = (intr.width + ts - 1) // ts
    nty = (intr.height + ts - 1) // ts
    x0 = np.clip(((proj.mean2d[:, 0] - proj.radius) // ts).astype(np.int64), 0, ntx - 1)
    x1 = np.clip(((proj.mean2d[:, 0] + proj.radius) // ts).astype(np.int64), 0, ntx - 1)
    y0 = np.clip(((proj.mean2d[:, 1] - proj.radius) // ts).astype(np.int64), 0, nty - 1)
    y1 = np.clip(((proj.mean2d[:, 1] + proj.radius) // ts).astype(np.int64), 0, nty - 1)
    # degenerate (radius 0) or fully offscreen boxes produce empty spans
    offscreen = (
        (proj.mean2d[:, 0] + proj.radius < 0)
        | (proj.mean2d[:, 0] - proj.radius > intr.width - 1)
        | (proj.mean2d[:, 1] + proj.radius < 0)
        | (proj.mean2d[:, 1] - proj.radius > intr.height - 1)
        | (proj.radius <= 0)
    )
    nx = np.where(offscreen, 0, x1 - x0 + 1)
    ny = np.where(offscreen, 0, y1 - y0 + 1)
    counts = nx * ny
    rows = np.repeat(np.arange(proj.idx.size), counts)
    if rows.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), ntx, nty
    offsets = np.concatenate([[0], np.cumsum(counts)])
    local = np.arange(rows.size) - offsets[rows]
    tile_x = x0[rows] + local % np.maximum(nx[rows], 1)
    tile_y = y0[rows] + local // np.maximum(nx[rows], 1)
    tile_id = tile_y * ntx + tile_x
    rank = _depth_order(proj)
    order = np.lexsort((rank[rows], tile_id))
    return tile_id[order], rows[order], ntx, nty


def _tile_pixels(tile_id, ntx, ts, intr):
    ty, tx = divmod(int(tile_id), ntx)
    xs = np.arange(tx * ts, min((tx + 1) * ts, intr.width), dtype=np.float64)
    ys = np.arange(ty * ts, min((ty + 1) * ts, intr.height), dtype=np.float64)
    px = np.repeat(xs[None, :], ys.size, axis=0).ravel()
    py = np.repeat(ys[:, None], xs.size, axis=1).ravel()
    return xs, ys, px, py


def _tile_alpha(proj, rows, px, py, cfg):
    """Alpha matrix (gaussians x pixels), transmittance, and masks for one tile.

    dx, dy are pixel minus mean, the d of the exponent d^T conic d.
    """
    dx = px[None, :] - proj.mean2d[rows, 0][:, None]
    dy = py[None, :] - proj.mean2d[rows, 1][:, None]
    ca = proj.conic[rows, 0][:, None]
    cb = proj.conic[rows, 1][:, None]
    cc = proj.conic[rows, 2][:, None]
    quad = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    gauss = np.exp(-0.5 * quad)
    alpha_raw = proj.opacity[rows][:, None] * gauss
    clamped = alpha_raw > cfg.alpha_clamp
    alpha = np.where(clamped, cfg.alpha_clamp, alpha_raw)
    trans = np.empty_like(alpha)
    trans[0] = 1.0
    if alpha.shape[0] > 1:
        np.cumprod(1.0 - alpha[:-1], axis=0, out=trans[1:])
    processed = trans >= cfg.transmittance_stop
    return dx, dy, gauss, alpha, clamped, trans, processed


def render_arrays(mu, scale, rotation, opacity, color, camera_pose: Pose,
                  intr: CameraIntrinsics, cfg: RenderConfig | None = None) -> RenderOutput:
    cfg = cfg or RenderConfig()
    h, w = intr.height, intr.width
    out = RenderOutput(
        color=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)),
        opacity=np.zeros((h, w)),
        per_pixel_count=np.zeros((h, w), dtype=np.int64),
    )
    if np.asarray(mu).size == 0:
        return out
    proj = _project(mu, scale, rotation, opacity, color, camera_pose, intr, cfg)
    if proj.idx.size == 0:
        return out
    tile_ids, rows_all, ntx, _ = _tile_instances(proj, intr, cfg)
    if tile_ids.size == 0:
        return out
    ts = cfg.tile_size
    bounds = np.flatnonzero(np.diff(tile_ids)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [tile_ids.size]])
    for s, e in zip(starts, ends):
        rows = rows_all[s:e]
        xs, ys, px, py = _tile_pixels(tile_ids[s], ntx, ts, intr)
        _, _, _, alpha, _, trans, processed = _tile_alpha(proj, rows, px, py, cfg)
        weight = alpha * trans * processed
        shape = (ys.size, xs.size)
        sl = np.s_[int(ys[0]):int(ys[0]) + ys.size, int(xs[0]):int(xs[0]) + xs.size]
        out.color[sl] = (weight.T @ proj.color[rows]).reshape(*shape, 3)
        out.depth[sl] = (weight * proj.depth[rows][:, None]).sum(axis=0).reshape(shape)
        out.opacity[sl] = weight.sum(axis=0).reshape(shape)
        out.per_pixel_count[sl] = ((alpha > 0) & processed).sum(axis=0).reshape(shape)
    return out


def render(gmap: GaussianMap, camera_pose: Pose, intr: CameraIntrinsics,
           cfg: RenderConfig | None = None) -> RenderOutput:
    return render_arrays(
        gmap.mu, gmap.scale, gmap.rotation, gmap.opacity, gmap.color,
        camera_pose, intr, cfg,
    )


def render_with_gradients_arrays(
    mu, scale, rotation, opacity, color, camera_pose: Pose, intr: CameraIntrinsics,
    adjoint: RenderAdjoint, cfg: RenderConfig | None = None,
) -> tuple[RenderOutput, MapGradients]:
    cfg = cfg or RenderConfig()
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    n = mu.shape[0]
    grads = MapGradients(
        mu=np.zeros((n, 3)),
        scale=np.zeros((n, 3)),
        rotation=np.zeros((n, 4)),
        opacity=np.zeros(n),
        color=np.zeros((n, 3)),
    )
    out = RenderOutput(
        color=np.zeros((intr.height, intr.width, 3)),
        depth=np.zeros((intr.height, intr.width)),
        opacity=np.zeros((intr.height, intr.width)),
        per_pixel_count=np.zeros((intr.height, intr.width), dtype=np.int64),
    )
    if n == 0:
        return out, grads
    proj = _project(mu, scale, rotation, opacity, color, camera_pose, intr, cfg)
    k = proj.idx.size
    if k == 0:
        return out, grads

    h, w = intr.height, intr.width
    g_color_img = np.zeros((h, w, 3)) if adjoint.color is None else np.asarray(adjoint.color, dtype=np.float64)
    g_depth_img = np.zeros((h, w)) if adjoint.depth is None else np.asarray(adjoint.depth, dtype=np.float64)
    g_opac_img = np.zeros((h, w)) if adjoint.opacity is None else np.asarray(adjoint.opacity, dtype=np.float64)

    # per-kept-gaussian accumulators over tiles
    g_mean2d = np.zeros((k, 2))
    g_conic = np.zeros((k, 3))  # adjoint of (A, B, C); B slot holds both off-diagonals
    g_opacity = np.zeros(k)
    g_color = np.zeros((k, 3))
    g_tz_blend = np.zeros(k)  # depth-payload adjoint

    tile_ids, rows_all, ntx, _ = _tile_instances(proj, intr, cfg)
    if tile_ids.size:
        ts = cfg.tile_size
        bounds = np.flatnonzero(np.diff(tile_ids)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [tile_ids.size]])
        for s, e in zip(starts, ends):
            rows = rows_all[s:e]
            xs, ys, px, py = _tile_pixels(tile_ids[s], ntx, ts, intr)
            dx, dy, gauss, alpha, clamped, trans, processed = _tile_alpha(
                proj, rows, px, py, cfg
            )
            weight = alpha * trans * processed
            shape = (ys.size, xs.size)
            sl = np.s_[int(ys[0]):int(ys[0]) + ys.size, int(xs[0]):int(xs[0]) + xs.size]
            out.color[sl] = (weight.T @ proj.color[rows]).reshape(*shape, 3)
            out.depth[sl] = (weight * proj.depth[rows][:, None]).sum(axis=0).reshape(shape)
            out.opacity[sl] = weight.sum(axis=0).reshape(shape)
            out.per_pixel_count[sl] = ((alpha > 0) & processed).sum(axis=0).reshape(shape)

            gc = g_color_img[sl].reshape(-1, 3)
            gd = g_depth_img[sl].reshape(-1)
            go = g_opac_img[sl].reshape(-1)
            # payload adjoint u = d(loss)/d(weight) per gaussian-pixel
            u = proj.color[rows] @ gc.T + proj.depth[rows][:, None] * gd[None, :] + go[None, :]
            uw = u * weight
            suffix = np.flipud(np.cumsum(np.flipud(uw), axis=0)) - uw
            d_alpha = (u * trans - suffix / (1.0 - alpha)) * processed
            d_alpha[clamped] = 0.0

            # rows are unique within a tile, so fancy += accumulates correctly
            g_color[rows] += weight @ gc
            g_tz_blend[rows] += (weight * gd[None, :]).sum(axis=1)
            g_opacity[rows] += (d_alpha * gauss).sum(axis=1)
            kk = d_alpha * alpha
            ca = proj.conic[rows, 0][:, None]
            cb = proj.conic[rows, 1][:, None]
            cc = proj.conic[rows, 2][:, None]
            # d(alpha)/d(mean2d) = alpha * conic @ (pixel - mean)
            g_mean2d[rows, 0] += (kk * (ca * dx + cb * dy)).sum(axis=1)
            g_mean2d[rows, 1] += (kk * (cb * dx + cc * dy)).sum(axis=1)
            g_conic[rows, 0] += (-0.5 * kk * dx * dx).sum(axis=1)
            g_conic[rows, 1] += (-kk * dx * dy).sum(axis=1)
            g_conic[rows, 2] += (-0.5 * kk * dy * dy).sum(axis=1)

    # chain conic -> cov2d -> (J, camera-frame covariance) -> attributes
    conic_mat = np.empty((k, 2, 2))
    conic_mat[:, 0, 0] = proj.conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = proj.conic[:, 1]
    conic_mat[:, 1, 1] = proj.conic[:, 2]
    g_conic_mat = np.empty((k, 2, 2))
    g_conic_mat[:, 0, 0] = g_conic[:, 0]
    g_conic_mat[:, 0, 1] = g_conic_mat[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_conic_mat[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", conic_mat, g_conic_mat, conic_mat)

    g_j = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, proj.j_cam, proj.a_cam)
    g_a_cam = np.einsum("nji,njk,nkl->nil", proj.j_cam, g_cov2d, proj.j_cam)
    g_cov3 = np.einsum("ji,njk,kl->nil", proj.w_cam, g_a_cam, proj.w_cam)

    # cov3 = R diag(s^2) R^T
    g_rot_mat = 2.0 * np.einsum(
        "nij,njk,nk->nik", g_cov3, proj.rot_mat, proj.scale**2
    )
    g_scale = 2.0 * proj.scale * np.einsum(
        "nji,njk,nki->ni", proj.rot_mat, g_cov3, proj.rot_mat
    )
    g_qhat = _quat_matrix_backward(proj.q_hat, g_rot_mat)
    # through normalization q_hat = q / |q|
    g_quat = (g_qhat - proj.q_hat * np.sum(g_qhat * proj.q_hat, axis=1, keepdims=True))
    g_quat /= proj.q_norm[:, None]

    # camera-frame position chain: mean2d (through J, same matrix), J itself, depth payload
    tx, ty, tz = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    g_t = np.einsum("nji,nj->ni", proj.j_cam, g_mean2d)
    g_t[:, 0] += g_j[:, 0, 2] * (-intr.fx / tz**2)
    g_t[:, 1] += g_j[:, 1, 2] * (-intr.fy / tz**2)
    g_t[:, 2] += (
        g_j[:, 0, 0] * (-intr.fx / tz**2)
        + g_j[:, 1, 1] * (-intr.fy / tz**2)
        + g_j[:, 0, 2] * (2.0 * intr.fx * tx / tz**3)
        + g_j[:, 1, 2] * (2.0 * intr.fy * ty / tz**3)
    )
    g_t[:, 2] += g_tz_blend
    g_mu = g_t @ proj.w_cam

    grads.mu[proj.idx] = g_mu
    grads.scale[proj.idx] = g_scale
    grads.rotation[proj.idx] = g_quat
    grads.opacity[proj.idx] = g_opacity
    grads.color[proj.idx] = g_color
    return out, grads


def _quat_matrix_backward(q_hat, g_rot):
    """Adjoint of the unit-quaternion -> rotation-matrix map."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    g = g_rot
    gw = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    gx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2.0 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2.0 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=1)


def render_with_gradients(
    gmap: GaussianMap, camera_pose: Pose, intr: CameraIntrinsics,
    adjoint: RenderAdjoint, cfg: RenderConfig | None = None,
) -> tuple[RenderOutput, MapGradients]:
    return render_with_gradients_arrays(
        gmap.mu, gmap.scale, gmap.rotation, gmap.opacity, gmap.color,
        camera_pose, intr, adjoint, cfg,
    )


def export_render(out: RenderOutput, prefix, raw_depth: bool = False) -> list:
    """Write color/depth/opacity PNGs (depth normalized by its max); optionally
    the raw depth as an FGSD float32 blob. Returns the written paths."""
    from . import imgio

    prefix = str(prefix)
    paths = [prefix + "_color.png", prefix + "_depth.png", prefix + "_opacity.png"]
    imgio.write_color_png(out.color, paths[0])
    peak = out.depth.max()
    imgio.write_gray_png(out.depth / peak if peak > 0 else out.depth, paths[1])
    imgio.write_gray_png(out.opacity, paths[2])
    if raw_depth:
        paths.append(prefix + "_depth.fgsd")
        imgio.write_depth_fgsd(out.depth, paths[-1])
    return paths
