"""Trajectory and image-quality metrics."""

import numpy as np

from .core import Pose
from .errors import InsufficientData

PSNR_CAP_DB = 100.0
ASSOCIATION_TOLERANCE_S = 0.02


def psnr(a, b) -> float:
    """10*log10(1/MSE) for images in [0,1]; identical images cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(-10.0 * np.log10(mse), PSNR_CAP_DB)


def associate_by_timestamp(est, truth, tolerance: float = ASSOCIATION_TOLERANCE_S):
    """Pair (timestamp, value) lists by nearest timestamp within tolerance.

    Each truth entry is used at most once; returns two equal-length lists.
    """
    taken = np.zeros(len(truth), dtype=bool)
    t_times = np.array([t for t, _ in truth])
    pairs_a, pairs_b = [], []
    for ts, value in est:
        if t_times.size == 0:
            break
        diff = np.abs(t_times - ts)
        diff[taken] = np.inf
        j = int(np.argmin(diff))
        if diff[j] <= tolerance:
            taken[j] = True
            pairs_a.append(value)
            pairs_b.append(truth[j][1])
    return pairs_a, pairs_b


def align_rigid(source: np.ndarray, target: np.ndarray):
    """Least-squares rotation + translation taking source points onto target."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, ct - rot @ cs


def ate_rmse(estimate, truth, tolerance: float = ASSOCIATION_TOLERANCE_S) -> float:
    """Absolute trajectory error: rigidly align estimated positions to the
    ground truth (no scale), then RMSE of the translational residuals.

    Both arguments are lists of (timestamp, Pose); pairs are associated by
    nearest timestamp within the tolerance.
    """
    est_p, gt_p = associate_by_timestamp(estimate, truth, tolerance)
    if len(est_p) < 2:
        raise InsufficientData(
            f"{len(est_p)} associated pose pairs, need at least 2"
        )
    e = np.stack([p.translation for p in est_p])
    g = np.stack([p.translation for p in gt_p])
    rot, trans = align_rigid(e, g)
    resid = e @ rot.T + trans - g
    return float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def trajectory_line(timestamp: float, pose: Pose) -> str:
    """One TUM-format line: ts tx ty tz qx qy qz qw."""
    t = pose.translation
    q = pose.rotation  # stored w-first
    return (f"{timestamp:.6f} {t[0]:.6f} {t[1]:.6f} {t[2]:.6f} "
            f"{q[1]:.6f} {q[2]:.6f} {q[3]:.6f} {q[0]:.6f}")


def parse_trajectory(path):
    """Read TUM trajectory lines into a list of (timestamp, Pose)."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ValueError(f"{path}: expected 8 values per line, got {len(vals)}")
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            out.append((ts, Pose(np.array([qw, qx, qy, qz]),
                                 np.array([tx, ty, tz]))))
    return out
