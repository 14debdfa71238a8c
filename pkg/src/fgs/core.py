"""Shared domain types: gaussians, maps, camera frames, rigid poses.

Conventions used across the package:
  - quaternions are (w, x, y, z), unit norm, world-frame orientation
  - Pose is camera-to-world: x_world = R x_cam + t
  - pixel (x, y) addresses array[y, x]; pixel centers sit at integer coordinates
  - gaussian covariance is C = R S S^T R^T with S = diag(scale)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9


class FrequencyClass(enum.IntEnum):
    """Which frequency mask spawned a gaussian (also its PLY uchar encoding)."""

    LOW = 0
    HIGH = 1


class KeyframeRole(enum.Enum):
    TRACKING = "tracking"
    MAPPING_ONLY = "mapping_only"


# ---------------------------------------------------------------------------
# quaternion / SE(3) utilities


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quats_to_matrices(q):
    """Rotation matrices (n,3,3) of unit quaternions (n,4) in (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Unit quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def rotation_exp(omega):
    """SO(3) exponential: rotation matrix of an axis-angle vector (Rodrigues)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        k = skew(omega)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = skew(omega / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


# ---------------------------------------------------------------------------
# domain types


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("pose quaternion is not unit norm")
        self.rotation = quat_normalize(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(matrix_to_quat(m[:3, :3]), m[:3, 3].copy())


def compose_poses(a: Pose, b: Pose) -> Pose:
    """Rigid composition a∘b: apply b first, then a."""
    return Pose(
        quat_normalize(quat_multiply(a.rotation, b.rotation)),
        a.rotation_matrix() @ b.translation + a.translation,
    )


def invert_pose(a: Pose) -> Pose:
    q_inv = quat_conjugate(a.rotation)
    return Pose(q_inv, -(quat_to_matrix(q_inv) @ a.translation))


def transform_point(a: Pose, p) -> np.ndarray:
    return a.rotation_matrix() @ np.asarray(p, dtype=np.float64) + a.translation


def transform_points(a: Pose, pts) -> np.ndarray:
    return np.asarray(pts, dtype=np.float64) @ a.rotation_matrix().T + a.translation


def covariance_from_scale_rotation(scale, rotation) -> np.ndarray:
    """World covariance C = R S S^T R^T of a gaussian, S = diag(scale)."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scale entries must be positive")
    if abs(np.linalg.norm(rotation) - 1.0) > QUAT_NORM_TOL * 10:
        raise ValueError("rotation quaternion must be unit norm")
    r = quat_to_matrix(rotation)
    return (r * scale**2) @ r.T


@dataclass
class Gaussian:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    frequency_class: FrequencyClass = FrequencyClass.LOW

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("quaternion is not unit norm")
        self.rotation = quat_normalize(self.rotation)
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity outside [0,1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValueError("color outside [0,1]")

    def covariance(self) -> np.ndarray:
        return covariance_from_scale_rotation(self.scale, self.rotation)


class MapKind(enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


class GaussianMap:
    """Growable struct-of-arrays gaussian collection.

    Indices are stable under insertion; keep() compacts and invalidates
    previously issued indices (the prune contract).
    """

    def __init__(self, kind: MapKind = MapKind.DENSE):
        self.kind = kind
        self.mu = np.empty((0, 3), dtype=np.float64)
        self.scale = np.empty((0, 3), dtype=np.float64)
        self.rotation = np.empty((0, 4), dtype=np.float64)
        self.opacity = np.empty(0, dtype=np.float64)
        self.color = np.empty((0, 3), dtype=np.float64)
        self.frequency_class = np.empty(0, dtype=np.uint8)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def add(self, gaussians) -> None:
        if isinstance(gaussians, Gaussian):
            gaussians = [gaussians]
        gaussians = list(gaussians)
        if not gaussians:
            return
        self.add_arrays(
            np.array([g.mu for g in gaussians]),
            np.array([g.scale for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.array([g.color for g in gaussians]),
            np.array([int(g.frequency_class) for g in gaussians], dtype=np.uint8),
        )

    def add_arrays(self, mu, scale, rotation, opacity, color, frequency_class) -> None:
        self.mu = np.concatenate([self.mu, np.atleast_2d(mu)])
        self.scale = np.concatenate([self.scale, np.atleast_2d(scale)])
        self.rotation = np.concatenate([self.rotation, np.atleast_2d(rotation)])
        self.opacity = np.concatenate([self.opacity, np.atleast_1d(opacity)])
        self.color = np.concatenate([self.color, np.atleast_2d(color)])
        self.frequency_class = np.concatenate(
            [self.frequency_class, np.atleast_1d(frequency_class).astype(np.uint8)]
        )

    def keep(self, mask) -> None:
        """Compact to the gaussians where mask is True (invalidates indices)."""
        mask = np.asarray(mask, dtype=bool)
        self.mu = self.mu[mask]
        self.scale = self.scale[mask]
        self.rotation = self.rotation[mask]
        self.opacity = self.opacity[mask]
        self.color = self.color[mask]
        self.frequency_class = self.frequency_class[mask]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.mu[i].copy(),
            self.scale[i].copy(),
            self.rotation[i].copy(),
            float(self.opacity[i]),
            self.color[i].copy(),
            FrequencyClass(int(self.frequency_class[i])),
        )

    def copy(self) -> "GaussianMap":
        out = GaussianMap(self.kind)
        out.mu = self.mu.copy()
        out.scale = self.scale.copy()
        out.rotation = self.rotation.copy()
        out.opacity = self.opacity.copy()
        out.color = self.color.copy()
        out.frequency_class = self.frequency_class.copy()
        return out


@dataclass
class RgbdFrame:
    color_image: np.ndarray  # H x W x 3 in [0,1]
    depth_image: np.ndarray  # H x W meters, 0 = invalid
    timestamp: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.color_image = np.asarray(self.color_image, dtype=np.float64)
        self.depth_image = np.asarray(self.depth_image, dtype=np.float64)
        if self.color_image.shape[:2] != self.depth_image.shape:
            raise ValueError("color and depth dimensions differ")
        if self.color_image.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("image dimensions do not match intrinsics")
        if np.any(self.depth_image < 0):
            raise ValueError("negative depth")


@dataclass
class Keyframe:
    frame: RgbdFrame
    pose: Pose
    role: KeyframeRole
    index: int
