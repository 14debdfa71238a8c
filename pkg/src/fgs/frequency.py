"""Frequency-domain analysis of a frame into high/low-frequency region masks.

Pipeline: grayscale -> 2D DFT -> center -> gaussian high-pass -> un-center ->
inverse DFT -> |residual| -> 256-bin histogram -> triangle threshold -> masks.
The DFT convention is

    F(u,v) = sum_x sum_y I(x,y) exp(-j 2 pi (u x / W + v y / H))

stored as array[v, u] for an H x W image, with the inverse carrying the
1/(H W) factor. Centering is the half-period circular shift that moves DC to
(floor(W/2), floor(H/2)); the high-pass weight at distance D from that center
is 1 - exp(-D^2 / (2 D0^2)), exactly zero on the DC bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RgbdFrame

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class Spectrum:
    data: np.ndarray  # complex, H x W, array[v, u]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class FrequencyMasks:
    high: np.ndarray
    low: np.ndarray
    threshold: float
    high_spacing_m: int
    low_spacing_n: int
    response: np.ndarray | None = None  # |filtered reconstruction|, diagnostics


def grayscale(color_image) -> np.ndarray:
    return np.asarray(color_image, dtype=np.float64) @ GRAY_WEIGHTS


def dft2(image) -> Spectrum:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("dft2 expects a nonempty H x W array")
    return Spectrum(np.fft.fft2(image))


def idft2(s: Spectrum) -> np.ndarray:
    out = np.fft.ifft2(s.data)
    return out.real


def center_spectrum(s: Spectrum) -> Spectrum:
    return Spectrum(np.fft.fftshift(s.data))


def uncenter_spectrum(s: Spectrum) -> Spectrum:
    return Spectrum(np.fft.ifftshift(s.data))


def magnitude(s: Spectrum) -> np.ndarray:
    return np.abs(s.data)


def gaussian_highpass(s: Spectrum, cutoff_d0: float) -> Spectrum:
    """Attenuate a centered spectrum by 1 - exp(-D^2/(2 D0^2)); DC bin -> 0."""
    if cutoff_d0 <= 0:
        raise ValueError("cutoff_d0 must be positive")
    h, w = s.shape
    cv, cu = h // 2, w // 2
    vv, uu = np.meshgrid(np.arange(h) - cv, np.arange(w) - cu, indexing="ij")
    d2 = vv.astype(np.float64) ** 2 + uu.astype(np.float64) ** 2
    weight = 1.0 - np.exp(-d2 / (2.0 * cutoff_d0**2))
    weight[cv, cu] = 0.0
    return Spectrum(s.data * weight)


def triangle_threshold(histogram) -> int:
    """Bin index of the triangle-method cut.

    Counts are normalized to [0,1]; the baseline runs from the peak to the
    farther of the first/last nonzero bins, and the returned bin maximizes
    perpendicular distance to that line among the bins between them (peak
    excluded). A peak that is the only nonzero bin degenerates to a
    length-one baseline toward the nearest neighbor bin.
    """
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("histogram must be 1-D with >= 2 bins")
    if np.any(counts < 0):
        raise ValueError("negative counts")
    total = counts.max()
    if total == 0:
        raise ValueError("empty histogram")
    norm = counts / total
    peak = int(np.argmax(norm))
    nonzero = np.nonzero(norm)[0]
    lo, hi = int(nonzero[0]), int(nonzero[-1])
    end = hi if (hi - peak) >= (peak - lo) else lo
    if end == peak:
        end = peak + 1 if peak + 1 < counts.size else peak - 1
    x0, y0 = float(peak), float(norm[peak])
    x1, y1 = float(end), float(norm[end])
    span = np.arange(min(peak, end), max(peak, end) + 1)
    span = span[span != peak]
    # distance of (x, y) to the baseline via the cross-product form
    dx, dy = x1 - x0, y1 - y0
    length = np.hypot(dx, dy)
    dist = np.abs(dy * (span - x0) - dx * (norm[span] - y0)) / length
    return int(span[np.argmax(dist)])


def highpass_response(image, cutoff_d0: float) -> np.ndarray:
    """|spatial reconstruction| after gaussian high-pass filtering."""
    spec = center_spectrum(dft2(image))
    filtered = uncenter_spectrum(gaussian_highpass(spec, cutoff_d0))
    return np.abs(idft2(filtered))


def frequency_masks(
    frame: RgbdFrame,
    cutoff_d0: float = 0.0,
    m: int = 2,
    n: int = 8,
    histogram_bins: int = 256,
) -> FrequencyMasks:
    """Segment a frame into disjoint, covering high/low-frequency masks."""
    if not 1 <= m < n:
        raise ValueError("spacings must satisfy 1 <= m < n")
    h, w = frame.depth_image.shape
    if cutoff_d0 <= 0:
        cutoff_d0 = min(h, w) / 16.0
    response = highpass_response(grayscale(frame.color_image), cutoff_d0)
    peak = float(response.max())
    if peak < 1e-12:
        high = np.zeros((h, w), dtype=bool)
        threshold = 0.0
    else:
        counts, edges = np.histogram(response, bins=histogram_bins, range=(0.0, peak))
        cut = triangle_threshold(counts)
        threshold = float(edges[cut])
        high = response >= threshold
    return FrequencyMasks(
        high=high,
        low=~high,
        threshold=threshold,
        high_spacing_m=m,
        low_spacing_n=n,
        response=response,
    )


def sample_grid(masks: FrequencyMasks):
    """Lattice sample points (x, y) inside each mask, lattices anchored at (0,0).

    Returns (high_points, low_points) as (k, 2) integer arrays of pixel
    coordinates, row-major order.
    """
    high = _lattice_points(masks.high, masks.high_spacing_m)
    low = _lattice_points(masks.low, masks.low_spacing_n)
    return high, low


def _lattice_points(mask: np.ndarray, spacing: int) -> np.ndarray:
    lattice = np.zeros_like(mask)
    lattice[::spacing, ::spacing] = True
    ys, xs = np.nonzero(mask & lattice)
    return np.stack([xs, ys], axis=1).astype(np.int64)
