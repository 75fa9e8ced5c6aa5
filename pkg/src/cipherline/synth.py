"""Procedural glyph atlases for experiments and tests.

Each class is a fixed set of random quadratic strokes; samples jitter the
stroke control points to imitate different writers. Written to disk in the
standard atlas layout (root/alphabet/class/sample.png).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .datagen import save_line_image, trim_to_ink

GLYPH_CANVAS = 48


def _draw_stroke(canvas: np.ndarray, pts: np.ndarray):
    """Rasterize a quadratic Bezier through 3 control points, 2 px thick."""
    t = np.linspace(0.0, 1.0, 64)[:, None]
    p = ((1 - t) ** 2) * pts[0] + 2 * (1 - t) * t * pts[1] + (t**2) * pts[2]
    rows = np.clip(np.round(p[:, 0]).astype(int), 0, canvas.shape[0] - 1)
    cols = np.clip(np.round(p[:, 1]).astype(int), 0, canvas.shape[1] - 1)
    canvas[rows, cols] = 1.0


def make_glyph(class_seed: int, sample_index: int, jitter: float = 1.6) -> np.ndarray:
    """One glyph sample: the class skeleton plus per-sample control jitter."""
    class_rng = np.random.default_rng([17, class_seed])
    n_strokes = int(class_rng.integers(3, 6))
    skeleton = class_rng.uniform(6, GLYPH_CANVAS - 6, size=(n_strokes, 3, 2))
    sample_rng = np.random.default_rng([23, class_seed, sample_index])
    pts = skeleton + sample_rng.normal(0.0, jitter, size=skeleton.shape)
    canvas = np.zeros((GLYPH_CANVAS, GLYPH_CANVAS), dtype=np.float32)
    for stroke in pts:
        _draw_stroke(canvas, stroke)
    canvas = ndimage.binary_dilation(canvas > 0).astype(np.float32)
    return trim_to_ink(canvas)


def make_synthetic_atlas(
    root: str | Path,
    n_alphabets: int = 40,
    classes_per_alphabet: int = 1,
    samples_per_class: int = 20,
    seed: int = 0,
) -> Path:
    """Write a synthetic atlas; class shapes depend only on (seed, indices)."""
    root = Path(root)
    class_counter = 0
    for a in range(n_alphabets):
        adir = root / f"alphabet_{a:03d}"
        for c in range(classes_per_alphabet):
            cdir = adir / f"class_{class_counter:04d}"
            cdir.mkdir(parents=True, exist_ok=True)
            for s in range(samples_per_class):
                glyph = make_glyph(seed * 100003 + class_counter, s)
                save_line_image(glyph, cdir / f"sample_{s:02d}.png")
            class_counter += 1
    return root
