"""PNG and raw-depth image I/O built on Pillow."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import DatasetError

FGSD_MAGIC = b"FGSD"
TUM_DEPTH_SCALE = 5000.0  # 16-bit PNG counts per meter


def write_color_png(image, path) -> None:
    """Save an H x W x 3 float image in [0,1] as 8-bit RGB."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def read_color_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_gray_png(image, path) -> None:
    """Save an H x W float image in [0,1] as 8-bit grayscale."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


def write_mask_png(mask, path) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def write_depth_png16(depth_m, path, scale: float = TUM_DEPTH_SCALE) -> None:
    """Save metric depth as 16-bit PNG at `scale` counts per meter (0 = invalid)."""
    counts = np.round(np.asarray(depth_m, dtype=np.float64) * scale)
    counts = np.clip(counts, 0, 65535).astype(np.uint16)
    Image.fromarray(counts, mode="I;16").save(path)


def read_depth_png16(path, scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as img:
        counts = np.asarray(img, dtype=np.float64)
    if counts.ndim != 2:
        raise DatasetError(f"{path}: depth PNG is not single-channel")
    return counts / scale


def write_depth_fgsd(depth_m, path) -> None:
    """Raw float32 depth blob: 16-byte header (magic, u32 H, u32 W, u32 zero)."""
    depth = np.ascontiguousarray(depth_m, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(FGSD_MAGIC)
        f.write(struct.pack("<III", h, w, 0))
        f.write(depth.tobytes())


def read_depth_fgsd(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != FGSD_MAGIC:
            raise DatasetError(f"{path}: bad FGSD header")
        h, w, _ = struct.unpack("<III", header[4:])
        body = f.read(h * w * 4)
    if len(body) != h * w * 4:
        raise DatasetError(f"{path}: truncated FGSD payload")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
