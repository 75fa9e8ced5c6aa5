"""Page preprocessing: Sauvola binarization, projection-profile line
segmentation, and support-symbol cropping."""

from __future__ import annotations

import numpy as np

from .datagen import Glyph, normalize_canvas, trim_to_ink
from .geometry import BBox

__all__ = ["binarize", "segment_lines", "segment_line_bands", "crop_support"]


def _window_sums(padded: np.ndarray, window: int) -> np.ndarray:
    """Sliding window sums via an integral image; padded has window-1 extra
    rows/cols so the result matches the unpadded shape."""
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    ii[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    w = window
    return ii[w:, w:] - ii[:-w, w:] - ii[w:, :-w] + ii[:-w, :-w]


def binarize(page: np.ndarray, window: int = 31, k: float = 0.2, r: float = 128.0) -> np.ndarray:
    """Sauvola adaptive threshold: T = m * (1 + k * (s / R - 1)), ink = 1.

    Expects a grayscale page with intensities in [0, 255], dark ink. Borders
    use symmetric padding for the local statistics.
    """
    page = np.asarray(page, dtype=np.float64)
    if page.size == 0:
        raise ValueError("binarize: empty image")
    if window > page.shape[0] and window > page.shape[1]:
        raise ValueError(f"binarize: window {window} larger than both image dims {page.shape}")
    half = window // 2
    padded = np.pad(page, half, mode="symmetric")
    n = window * window
    mean = _window_sums(padded, window) / n
    sq = _window_sums(padded**2, window) / n
    std = np.sqrt(np.clip(sq - mean**2, 0.0, None))
    threshold = mean * (1.0 + k * (std / r - 1.0))
    return (page <= threshold).astype(np.float32)


def segment_line_bands(
    binary: np.ndarray,
    smooth_rows: int = 5,
    min_fraction: float = 0.02,
    pad: int = 4,
) -> list[tuple[int, int]]:
    """Row ranges [start, end) of text lines from the horizontal ink profile."""
    binary = np.asarray(binary)
    profile = binary.sum(axis=1).astype(np.float64)
    kernel = np.ones(smooth_rows) / smooth_rows
    smoothed = np.convolve(profile, kernel, mode="same")
    active = smoothed > min_fraction * binary.shape[1]
    bands = []
    start = None
    for i, on in enumerate(active):
        if on and start is None:
            start = i
        elif not on and start is not None:
            bands.append((start, i))
            start = None
    if start is not None:
        bands.append((start, len(active)))
    return [(max(0, s - pad), min(binary.shape[0], e + pad)) for s, e in bands]


def segment_lines(binary: np.ndarray, smooth_rows: int = 5, min_fraction: float = 0.02, pad: int = 4) -> list[np.ndarray]:
    """Cut a binarized page into line images, ordered top to bottom."""
    return [binary[s:e] for s, e in segment_line_bands(binary, smooth_rows, min_fraction, pad)]


def crop_support(line: np.ndarray, box: BBox, canvas: int = 48) -> Glyph:
    """Crop a support symbol, trim to ink, normalize onto the support canvas."""
    h, w = line.shape
    if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
        raise ValueError(f"crop_support: box {box} outside image {w}x{h}")
    crop = line[int(box.y1) : int(np.ceil(box.y2)), int(box.x1) : int(np.ceil(box.x2))]
    if not np.any(crop > 0):
        raise ValueError("crop_support: crop contains no ink")
    return Glyph(normalize_canvas(trim_to_ink(crop), canvas))
