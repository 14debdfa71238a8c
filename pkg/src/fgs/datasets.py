"""Dataset ingestion: TUM RGB-D directories and a synthetic textured box room.

The synthetic generator raycasts a closed room (checkerboard, smooth-gradient,
and value-noise walls, plus optional obstacle boxes) from a smooth camera
path, producing exact color, z-depth, and poses — a desk-scale stand-in for a
real capture with perfect ground truth.
"""

import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, Pose, RgbdFrame, matrix_to_quat
from .errors import DatasetError
from .imgio import (
    read_color_png,
    read_depth_png16,
    write_color_png,
    write_depth_png16,
)
from .metrics import ASSOCIATION_TOLERANCE_S, parse_trajectory, trajectory_line

# TUM "default" pinhole parameters, defined at 640x480 and scaled to the
# actual image size on load
TUM_FX, TUM_FY, TUM_CX, TUM_CY = 525.0, 525.0, 319.5, 239.5

MANIFEST_NAME = "manifest.txt"


# ---------------------------------------------------------------------------
# synthetic scene


@dataclass
class SceneSpec:
    width: int = 320
    height: int = 240
    focal: float = 200.0
    path: str = "orbit"  # orbit | static | line
    orbit_degrees: float = 60.0
    orbit_radius: float = 0.4
    line_step: float = 0.01
    room_half_x: float = 1.2
    room_half_y: float = 0.9
    room_half_z: float = 1.4
    obstacles: bool = True
    fps: float = 30.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError("image dimensions and focal length must be positive")
        if self.path not in ("orbit", "static", "line"):
            raise ValueError(f"unknown camera path {self.path!r}")
        if min(self.room_half_x, self.room_half_y, self.room_half_z) <= 0:
            raise ValueError("room extents must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0,
                                self.height / 2.0, self.width, self.height)


def _checker(tiles_u, tiles_v, c0, c1, edge=0.12):
    """Checkerboard with edges ramped over `edge` of a tile (band-limited,
    like a real camera image; hard pixel steps are not representable by the
    splat radii the map spawns at)."""
    c0, c1 = np.asarray(c0, dtype=np.float64), np.asarray(c1, dtype=np.float64)
    gain = 1.0 / (np.pi * edge)

    def tex(u, v):
        su = np.clip(np.sin(np.pi * u * tiles_u) * gain, -1.0, 1.0)
        sv = np.clip(np.sin(np.pi * v * tiles_v) * gain, -1.0, 1.0)
        mix = 0.5 * (1.0 + su * sv)
        return c0 + (c1 - c0) * mix[:, None]

    return tex


def _gradient(c00, c10, c01):
    c00 = np.asarray(c00, dtype=np.float64)
    du = np.asarray(c10, dtype=np.float64) - c00
    dv = np.asarray(c01, dtype=np.float64) - c00

    def tex(u, v):
        return np.clip(c00 + u[:, None] * du + v[:, None] * dv, 0.0, 1.0)

    return tex


def _noise(grid):
    nu, nv = grid.shape[0] - 1, grid.shape[1] - 1

    def tex(u, v):
        x = np.clip(u, 0.0, 1.0) * nu
        y = np.clip(v, 0.0, 1.0) * nv
        x0 = np.minimum(x.astype(np.int64), nu - 1)
        y0 = np.minimum(y.astype(np.int64), nv - 1)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        top = grid[x0, y0] * (1 - fx) + grid[x0 + 1, y0] * fx
        bot = grid[x0, y0 + 1] * (1 - fx) + grid[x0 + 1, y0 + 1] * fx
        return top * (1 - fy) + bot * fy

    return tex


def _split(left, right, at=0.5, width=0.01):
    """Left/right textures meeting at u = `at` with a narrow blended seam."""

    def tex(u, v):
        a = left(np.clip(u / at, 0.0, 1.0), v)
        b = right(np.clip((u - at) / (1.0 - at), 0.0, 1.0), v)
        m = np.clip((u - at) / width + 0.5, 0.0, 1.0)[:, None]
        return a * (1.0 - m) + b * m

    return tex


@dataclass
class _Face:
    """Bounded axis-aligned rectangle: plane axis k at coordinate c, spanning
    [lo1, hi1] x [lo2, hi2] on the remaining two axes (in ascending order)."""

    axis: int
    coord: float
    lo1: float
    hi1: float
    lo2: float
    hi2: float
    texture: object


class _Scene:
    def __init__(self, spec: SceneSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(seed)
        # 6x6 keeps the blotches well below the frequency cutoff at orbit
        # distances, like a painted wall rather than wallpaper; the fine
        # grid reads as one compact detailed patch (a rug or bookshelf),
        # not a lace of edges
        noise_grid = rng.uniform(0.0, 1.0, size=(6, 6, 3))
        fine_grid = rng.uniform(0.0, 1.0, size=(24, 18, 3))
        hx, hy, hz = spec.room_half_x, spec.room_half_y, spec.room_half_z

        front = _split(
            _noise(fine_grid),
            _gradient((0.2, 0.3, 0.7), (0.7, 0.3, 0.2), (0.3, 0.7, 0.4)),
            at=0.35,
        )
        self.faces = [
            _Face(0, +hx, -hy, hy, -hz, hz, _noise(noise_grid)),
            _Face(0, -hx, -hy, hy, -hz, hz,
                  _gradient((0.1, 0.2, 0.6), (0.1, 0.6, 0.3), (0.4, 0.5, 0.7))),
            _Face(1, +hy, -hx, hx, -hz, hz,
                  _gradient((0.45, 0.3, 0.2), (0.6, 0.45, 0.3), (0.5, 0.4, 0.3))),
            _Face(1, -hy, -hx, hx, -hz, hz,
                  _gradient((0.8, 0.8, 0.8), (0.75, 0.75, 0.8), (0.85, 0.8, 0.75))),
            _Face(2, +hz, -hx, hx, -hy, hy, front),
            _Face(2, -hz, -hx, hx, -hy, hy,
                  _gradient((0.4, 0.2, 0.5), (0.3, 0.3, 0.6), (0.5, 0.3, 0.4))),
        ]
        if spec.obstacles:
            self.faces += _box_faces(
                (-0.20 * hx, 0.10 * hy, 0.50 * hz),
                (0.04 * hx, 1.00 * hy, 0.71 * hz),
                _gradient((0.7, 0.25, 0.2), (0.8, 0.35, 0.25), (0.6, 0.2, 0.2)),
            )
            self.faces += _box_faces(
                (0.50 * hx, -0.22 * hy, 0.43 * hz),
                (0.75 * hx, 0.66 * hy, 0.64 * hz),
                _noise(rng.uniform(0.0, 1.0, size=(5, 5, 3))),
            )

    def render(self, pose: Pose, intr: CameraIntrinsics):
        h, w = intr.height, intr.width
        xs = (np.arange(w, dtype=np.float64) - intr.cx) / intr.fx
        ys = (np.arange(h, dtype=np.float64) - intr.cy) / intr.fy
        du, dv = np.meshgrid(xs, ys)
        dirs_cam = np.stack([du.ravel(), dv.ravel(), np.ones(h * w)], axis=1)
        rot = pose.rotation_matrix()
        d = dirs_cam @ rot.T
        o = pose.translation

        best_t = np.full(h * w, np.inf)
        best_face = np.full(h * w, -1, dtype=np.int64)
        for i, face in enumerate(self.faces):
            t = _intersect_face(o, d, face)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_face[closer] = i

        color = np.zeros((h * w, 3))
        for i, face in enumerate(self.faces):
            sel = best_face == i
            if not sel.any():
                continue
            p = o + best_t[sel, None] * d[sel]
            a1, a2 = _other_axes(face.axis)
            u = (p[:, a1] - face.lo1) / (face.hi1 - face.lo1)
            v = (p[:, a2] - face.lo2) / (face.hi2 - face.lo2)
            color[sel] = face.texture(u, v)
        depth = np.where(np.isfinite(best_t), best_t, 0.0)
        return color.reshape(h, w, 3), depth.reshape(h, w)


def _other_axes(axis: int):
    return [(1, 2), (0, 2), (0, 1)][axis]


def _intersect_face(o, d, face: _Face) -> np.ndarray:
    """Ray parameter of the hit on a bounded plane; inf where missed. The
    parameter equals camera z-depth because ray directions have unit camera-z."""
    k = face.axis
    a1, a2 = _other_axes(k)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (face.coord - o[k]) / d[:, k]
        p1 = o[a1] + t * d[:, a1]  # inf*0 -> nan, rejected by the bounds
        p2 = o[a2] + t * d[:, a2]
    eps = 1e-9
    ok = (t > 1e-6) & np.isfinite(t)
    ok &= (p1 >= face.lo1 - eps) & (p1 <= face.hi1 + eps)
    ok &= (p2 >= face.lo2 - eps) & (p2 <= face.hi2 + eps)
    return np.where(ok, t, np.inf)


def _box_faces(lo, hi, texture):
    lo, hi = np.asarray(lo), np.asarray(hi)
    out = []
    for axis in range(3):
        a1, a2 = _other_axes(axis)
        for coord in (lo[axis], hi[axis]):
            out.append(_Face(axis, float(coord), float(lo[a1]), float(hi[a1]),
                             float(lo[a2]), float(hi[a2]), texture))
    return out


def _rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _path_pose(spec: SceneSpec, i: int, frames: int) -> Pose:
    if spec.path == "static":
        return Pose.identity()
    if spec.path == "line":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                    np.array([spec.line_step * i, 0.0, 0.0]))
    # Out-and-back sweep at constant angular speed: the second half revisits
    # the first half's views, as a real scan of a room does.
    f = i / max(frames - 1, 1)
    theta = math.radians(spec.orbit_degrees) * (2.0 * f if f <= 0.5 else 2.0 * (1.0 - f))
    rot = _rot_y(theta)
    pivot = np.array([0.0, 0.0, spec.orbit_radius])
    trans = pivot - rot @ np.array([0.0, 0.0, spec.orbit_radius])
    return Pose(matrix_to_quat(rot), trans)


def generate_synthetic_sequence(spec: SceneSpec, frames: int, seed: int = 0):
    """Deterministic (frames, ground-truth trajectory) for the box-room scene."""
    if frames < 1:
        raise ValueError("need at least one frame")
    scene = _Scene(spec, seed)
    intr = spec.intrinsics()
    sequence, truth = [], []
    for i in range(frames):
        pose = _path_pose(spec, i, frames)
        color, depth = scene.render(pose, intr)
        ts = i / spec.fps
        sequence.append(RgbdFrame(color, depth, ts, intr))
        truth.append((ts, pose))
    return sequence, truth


def write_synthetic_dataset(spec: SceneSpec, frames: int, seed: int, out_dir):
    """Write the sequence in TUM layout (rgb/, depth/, list files, ground
    truth) plus a manifest from which `load_synthetic` regenerates the exact
    float frames (PNG depth is quantized; the manifest round-trip is not)."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    sequence, truth = generate_synthetic_sequence(spec, frames, seed)
    rgb_lines, depth_lines, gt_lines = [], [], []
    for frame, (ts, pose) in zip(sequence, truth):
        name = f"{ts:.6f}.png"
        write_color_png(frame.color_image, out / "rgb" / name)
        write_depth_png16(frame.depth_image, out / "depth" / name)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
        gt_lines.append(trajectory_line(ts, pose))
    (out / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    (out / "groundtruth.txt").write_text(
        "# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n")
    manifest = [f"frames={frames}", f"seed={seed}"]
    for f in fields(SceneSpec):
        manifest.append(f"{f.name}={getattr(spec, f.name)}")
    (out / MANIFEST_NAME).write_text("\n".join(manifest) + "\n")
    return sequence, truth


def _read_key_values(path: Path) -> dict:
    """`key = value` lines ('#' comments) into a raw string dict."""
    values = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise DatasetError(f"{path}: expected 'key = value' lines")
        values[key.strip()] = val.strip()
    return values


def _spec_from_values(values: dict, source) -> SceneSpec:
    """Coerce raw strings into a SceneSpec; consumes recognized keys."""
    defaults = SceneSpec()
    kwargs = {}
    for f in fields(SceneSpec):
        if f.name in values:
            raw = values.pop(f.name)
            template = getattr(defaults, f.name)
            if isinstance(template, bool):
                kwargs[f.name] = raw.lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = type(template)(raw)
    if values:
        raise DatasetError(f"{source}: unknown keys {sorted(values)}")
    return SceneSpec(**kwargs)


def read_scene_spec(path) -> SceneSpec:
    """Parse a flat scene description file (same keys as SceneSpec fields)."""
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"{p}: missing scene spec")
    try:
        return _spec_from_values(_read_key_values(p), p)
    except ValueError as exc:
        raise DatasetError(f"{p}: {exc}") from exc


def load_synthetic(dataset_dir):
    """Regenerate a synthetic dataset bit-exactly from its manifest."""
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"{path}: missing synthetic manifest")
    values = _read_key_values(path)
    try:
        frames = int(values.pop("frames"))
        seed = int(values.pop("seed"))
        spec = _spec_from_values(values, path)
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    return generate_synthetic_sequence(spec, frames, seed)


# ---------------------------------------------------------------------------
# TUM RGB-D


def _read_file_list(path: Path):
    if not path.is_file():
        raise DatasetError(f"{path}: missing")
    entries = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}: expected 'timestamp filename' lines")
        entries.append((float(parts[0]), parts[1]))
    return entries


def _associate(rgb_entries, depth_entries, tolerance):
    depth_ts = np.array([t for t, _ in depth_entries])
    taken = np.zeros(len(depth_entries), dtype=bool)
    matches, dropped = [], 0
    for ts, rgb_path in rgb_entries:
        diff = np.abs(depth_ts - ts) if depth_ts.size else np.array([np.inf])
        if depth_ts.size:
            diff = diff.copy()
            diff[taken] = np.inf
        j = int(np.argmin(diff))
        if depth_ts.size and diff[j] <= tolerance:
            taken[j] = True
            matches.append((ts, rgb_path, depth_entries[j][1]))
        else:
            dropped += 1
    return matches, dropped


def load_tum_rgbd(dataset_dir, tolerance: float = ASSOCIATION_TOLERANCE_S):
    """Load a TUM-convention directory into (frames, ground truth or None).

    Color/depth pairs are associated by nearest timestamp within the
    tolerance; depth PNGs decode at 5000 counts/m; intrinsics are the TUM
    defaults scaled to the actual image size.
    """
    root = Path(dataset_dir)
    rgb_entries = _read_file_list(root / "rgb.txt")
    depth_entries = _read_file_list(root / "depth.txt")
    matches, dropped = _associate(rgb_entries, depth_entries, tolerance)
    if not matches:
        raise DatasetError(f"{root}: no color/depth pairs within {tolerance} s")
    if dropped:
        warnings.warn(f"{root}: dropped {dropped} unassociated frames")

    frames = []
    intr = None
    for ts, rgb_rel, depth_rel in matches:
        try:
            color = read_color_png(root / rgb_rel)
            depth = read_depth_png16(root / depth_rel)
        except OSError as exc:
            raise DatasetError(f"{root}: unreadable image ({exc})") from exc
        if intr is None:
            h, w = depth.shape
            sx, sy = w / 640.0, h / 480.0
            intr = CameraIntrinsics(TUM_FX * sx, TUM_FY * sy,
                                    TUM_CX * sx, TUM_CY * sy, w, h)
        frames.append(RgbdFrame(color, depth, ts, intr))

    gt_path = root / "groundtruth.txt"
    truth = parse_trajectory(gt_path) if gt_path.is_file() else None
    return frames, truth
