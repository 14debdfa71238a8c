"""Binary little-endian PLY serialization of gaussian maps.

One vertex per gaussian: x,y,z, scale_0..2, rot_0..3 (quaternion wxyz),
opacity, red, green, blue as float32, freq_class as uchar (0=Low, 1=High).
"""

from __future__ import annotations

import numpy as np

from .core import GaussianMap, MapKind
from .errors import DatasetError

_FIELDS = [
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "red", "green", "blue",
]

_VERTEX_DTYPE = np.dtype(
    [(name, "<f4") for name in _FIELDS] + [("freq_class", "u1")]
)


def write_map_ply(gmap: GaussianMap, path) -> None:
    n = len(gmap)
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        + [f"property float {name}" for name in _FIELDS]
        + ["property uchar freq_class", "end_header", ""]
    )
    rows = np.empty(n, dtype=_VERTEX_DTYPE)
    packed = np.hstack(
        [gmap.mu, gmap.scale, gmap.rotation, gmap.opacity[:, None], gmap.color]
    ).astype(np.float32)
    for j, name in enumerate(_FIELDS):
        rows[name] = packed[:, j]
    rows["freq_class"] = gmap.frequency_class
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rows.tobytes())


def read_map_ply(path, kind: MapKind = MapKind.DENSE) -> GaussianMap:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", "replace").splitlines()
    n = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[2])
    if n is None:
        raise DatasetError(f"{path}: missing vertex element")
    if props != _FIELDS + ["freq_class"]:
        raise DatasetError(f"{path}: unexpected property layout {props}")
    body = blob[end + len(b"end_header\n"):]
    rows = np.frombuffer(body, dtype=_VERTEX_DTYPE, count=n)
    gmap = GaussianMap(kind)
    gmap.mu = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
    gmap.scale = np.stack(
        [rows["scale_0"], rows["scale_1"], rows["scale_2"]], axis=1
    ).astype(np.float64)
    rot = np.stack(
        [rows["rot_0"], rows["rot_1"], rows["rot_2"], rows["rot_3"]], axis=1
    ).astype(np.float64)
    norms = np.linalg.norm(rot, axis=1)
    if np.any(norms == 0):
        raise DatasetError(f"{path}: zero quaternion")
    gmap.rotation = rot / norms[:, None]
    gmap.opacity = rows["opacity"].astype(np.float64)
    gmap.color = np.stack([rows["red"], rows["green"], rows["blue"]], axis=1).astype(
        np.float64
    )
    gmap.frequency_class = rows["freq_class"].copy()
    return gmap
