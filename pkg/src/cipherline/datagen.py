"""Glyph atlas management, random glyph transforms, synthetic line composition
and N-way K-shot episode sampling with disjoint train/test alphabets."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import BBox

log = logging.getLogger(__name__)

INK_THRESHOLD = 0.3  # binarize interpolated pixels back to {0, 1}


class AtlasError(ValueError):
    pass


@dataclass
class Glyph:
    """A single symbol sample: binary ink (1) on background (0)."""

    image: np.ndarray  # (H, W) float32 in {0, 1}
    class_id: int = -1
    alphabet_id: int = -1
    sample_index: int = -1

    def __post_init__(self):
        if self.image.ndim != 2 or not np.any(self.image > 0):
            raise AtlasError("glyph must be a 2-D image with at least one ink pixel")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def trim_to_ink(image: np.ndarray) -> np.ndarray:
    """Crop an image to the bounding box of its ink pixels."""
    ys, xs = np.nonzero(image > 0)
    if len(ys) == 0:
        raise AtlasError("cannot trim an empty image")
    return image[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


@dataclass
class ClassEntry:
    class_id: int
    alphabet: str
    name: str
    split: str  # "train" | "test"
    query_pool: list[Glyph]
    support_pool: list[Glyph]


@dataclass
class SplitSpec:
    """Assignment of alphabets to the train and test splits."""

    train_alphabets: list[str]
    test_alphabets: list[str]

    def __post_init__(self):
        overlap = set(self.train_alphabets) & set(self.test_alphabets)
        if overlap:
            raise AtlasError(f"train/test alphabets must be disjoint, got overlap {sorted(overlap)}")

    @classmethod
    def by_fraction(cls, alphabets: Sequence[str], train_fraction: float = 0.75) -> "SplitSpec":
        names = sorted(alphabets)
        n_train = max(1, int(round(train_fraction * len(names))))
        n_train = min(n_train, len(names) - 1) if len(names) > 1 else len(names)
        return cls(list(names[:n_train]), list(names[n_train:]))


@dataclass
class Atlas:
    classes: dict[int, ClassEntry]

    def class_ids(self, split: str | None = None) -> list[int]:
        return sorted(
            cid for cid, e in self.classes.items() if split is None or e.split == split
        )

    def alphabets(self, split: str | None = None) -> list[str]:
        return sorted({e.alphabet for e in self.classes.values() if split is None or e.split == split})


def _split_pools(n: int) -> tuple[int, int]:
    # 20 samples follow the 7/10 protocol; otherwise 35%/65% with >= 1 query sample
    if n == 20:
        return 7, 10
    q = max(1, math.floor(0.35 * n))
    return q, n - q


def load_glyph_image(path: str | Path) -> np.ndarray:
    """Load a raster image as binary ink=1 on 0, trimmed, polarity-normalized."""
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    # assume ink is the minority value; dark-on-light scans get inverted
    ink_dark = (arr < 0.5).mean() <= 0.5
    binary = (arr < 0.5) if ink_dark else (arr >= 0.5)
    return trim_to_ink(binary.astype(np.float32))


def load_atlas(root_path: str | Path, split_spec: SplitSpec) -> Atlas:
    """Load an atlas from root/alphabet/class/sample.png with deterministic ids.

    Class ids follow sorted path order. Each class splits its samples into a
    query pool and a support pool by sample index.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise AtlasError(f"atlas root not found: {root}")
    alphabet_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not alphabet_dirs:
        raise AtlasError(f"atlas root has no alphabet directories: {root}")
    split_of = {a: "train" for a in split_spec.train_alphabets}
    split_of.update({a: "test" for a in split_spec.test_alphabets})
    classes: dict[int, ClassEntry] = {}
    class_id = 0
    for adir in alphabet_dirs:
        if adir.name not in split_of:
            continue
        split = split_of[adir.name]
        aid = len({e.alphabet for e in classes.values()} | {adir.name}) - 1
        for cdir in sorted(p for p in adir.iterdir() if p.is_dir()):
            samples = sorted(p for p in cdir.iterdir() if p.is_file())
            if len(samples) < 2:
                raise AtlasError(f"class {cdir} has fewer than 2 samples")
            glyphs = [
                Glyph(load_glyph_image(p), class_id=class_id, alphabet_id=aid, sample_index=i)
                for i, p in enumerate(samples)
            ]
            nq, _ = _split_pools(len(glyphs))
            classes[class_id] = ClassEntry(
                class_id=class_id,
                alphabet=adir.name,
                name=cdir.name,
                split=split,
                query_pool=glyphs[:nq],
                support_pool=glyphs[nq:] if len(glyphs) != 20 else glyphs[10:],
            )
            class_id += 1
    if not classes:
        raise AtlasError("no classes matched the split spec")
    return Atlas(classes)


# ---------------------------------------------------------------------------
# transforms


@dataclass
class TransformConfig:
    probability: float = 0.5  # independent per transform
    scale_min: float = 0.7
    scale_max: float = 1.3
    rotate_deg: float = 15.0


def _rebinarize(image: np.ndarray) -> np.ndarray:
    return (image > INK_THRESHOLD).astype(np.float32)


def transform_glyph(g: Glyph, rng: np.random.Generator, cfg: TransformConfig | None = None) -> Glyph:
    """Random resize / rotation / 1-px morphology, each applied with prob 0.5.

    Erosion is skipped when it would erase all ink; output is re-trimmed.
    """
    cfg = cfg or TransformConfig()
    if not (cfg.scale_min >= 0.5 and cfg.scale_max <= 1.5):
        raise ValueError(f"scale range out of domain: {cfg.scale_min}..{cfg.scale_max}")
    img = g.image
    if rng.random() < cfg.probability:
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        img = _rebinarize(ndimage.zoom(img, scale, order=1, grid_mode=False))
    if rng.random() < cfg.probability:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        img = _rebinarize(ndimage.rotate(img, angle, reshape=True, order=1))
    if rng.random() < cfg.probability:
        if rng.random() < 0.5:
            img = ndimage.binary_dilation(img > 0).astype(np.float32)
        else:
            eroded = ndimage.binary_erosion(img > 0).astype(np.float32)
            if np.any(eroded > 0):
                img = eroded
    if not np.any(img > 0):
        img = g.image  # transform degenerated a tiny glyph; keep the original
    img = trim_to_ink(img)
    return replace(g, image=img)


# ---------------------------------------------------------------------------
# line composition


@dataclass
class ComposeConfig:
    line_height: int = 64
    max_glyph_height: int = 56
    gap_min: int = -8  # negative gaps overlap neighbours
    gap_max: int = 12
    vertical_jitter: int = 6
    margin: int = 4
    min_symbols: int = 5
    max_symbols: int = 50
    support_size: int = 48
    ascender_strokes: bool = False  # inter-line clutter, off by default

    def hash(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class LineSample:
    image: np.ndarray  # (line_height, W) float32 in {0, 1}
    gt: list[tuple[BBox, int]]  # placement order, left to right


def _fit_glyph(img: np.ndarray, cfg: ComposeConfig) -> np.ndarray:
    h = img.shape[0]
    if h > cfg.max_glyph_height:
        img = _rebinarize(ndimage.zoom(img, cfg.max_glyph_height / h, order=1))
        img = trim_to_ink(img)
    return img


def compose_line(glyphs: Sequence[Glyph], rng: np.random.Generator, cfg: ComposeConfig | None = None) -> LineSample:
    """Place glyphs left to right with random gaps and vertical jitter.

    Ink is composited by max; ground-truth boxes are the placed glyph extents.
    """
    cfg = cfg or ComposeConfig()
    if not (cfg.min_symbols <= len(glyphs) <= cfg.max_symbols):
        raise ValueError(
            f"line must contain {cfg.min_symbols}..{cfg.max_symbols} symbols, got {len(glyphs)}"
        )
    placements = []
    x = cfg.margin
    for i, g in enumerate(glyphs):
        img = _fit_glyph(g.image, cfg)
        h, w = img.shape
        if i > 0:
            gap = int(rng.integers(cfg.gap_min, cfg.gap_max + 1))
            x = max(0, x + gap)
        jitter = int(rng.integers(-cfg.vertical_jitter, cfg.vertical_jitter + 1))
        top = (cfg.line_height - h) // 2 + jitter
        top = min(max(top, 0), cfg.line_height - h)
        placements.append((x, top, img, g.class_id))
        x += w
    width = max(px + img.shape[1] for px, _, img, _ in placements) + cfg.margin
    canvas = np.zeros((cfg.line_height, width), dtype=np.float32)
    gt = []
    for px, py, img, cid in placements:
        h, w = img.shape
        canvas[py : py + h, px : px + w] = np.maximum(canvas[py : py + h, px : px + w], img)
        gt.append((BBox(float(px), float(py), float(px + w), float(py + h)), cid))
    return LineSample(canvas, gt)


def _draw_query_glyphs(
    atlas: Atlas,
    class_ids: Sequence[int],
    n_symbols: int,
    rng: np.random.Generator,
    cfg: ComposeConfig,
    required: Sequence[int] = (),
) -> list[Glyph]:
    labels = [int(rng.choice(class_ids)) for _ in range(n_symbols)]
    for slot, cid in zip(rng.permutation(n_symbols)[: len(required)], required):
        labels[int(slot)] = cid
    out = []
    for cid in labels:
        pool = atlas.classes[cid].query_pool
        g = pool[int(rng.integers(len(pool)))]
        out.append(transform_glyph(g, rng))
    return out


def generate_corpus(
    atlas: Atlas,
    n_lines: int,
    seed: int,
    cfg: ComposeConfig,
    out_dir: str | Path,
    split: str = "train",
) -> Path:
    """Write n_lines composed lines plus JSONL annotations and a manifest.

    Deterministic in (atlas, seed, cfg): each line derives its own child seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    class_ids = atlas.class_ids(split)
    if n_lines > 0 and not class_ids:
        raise AtlasError(f"split {split!r} has no classes")
    ann_path = out / "annotations.jsonl"
    with open(ann_path, "w") as ann:
        for i in range(n_lines):
            rng = np.random.default_rng([seed, i])
            n_symbols = int(rng.integers(cfg.min_symbols, cfg.max_symbols + 1))
            glyphs = _draw_query_glyphs(atlas, class_ids, n_symbols, rng, cfg)
            line = compose_line(glyphs, rng, cfg)
            name = f"line_{i:06d}.png"
            save_line_image(line.image, out / name)
            record = {
                "image": name,
                "boxes": [[b.x1, b.y1, b.x2, b.y2] for b, _ in line.gt],
                "labels": [cid for _, cid in line.gt],
            }
            ann.write(json.dumps(record, sort_keys=True) + "\n")
    manifest = {"seed": seed, "config_hash": cfg.hash(), "n_lines": n_lines, "split": split}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return out


def save_line_image(image: np.ndarray, path: str | Path):
    Image.fromarray((image * 255).astype(np.uint8), mode="L").save(path)


def load_line_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    return (arr > 0.5).astype(np.float32)


def load_corpus(corpus_dir: str | Path) -> list[LineSample]:
    corpus_dir = Path(corpus_dir)
    ann_path = corpus_dir / "annotations.jsonl"
    if not ann_path.is_file():
        raise AtlasError(f"no annotations.jsonl under {corpus_dir}")
    lines = []
    with open(ann_path) as f:
        for row in f:
            rec = json.loads(row)
            image = load_line_image(corpus_dir / rec["image"])
            gt = [
                (BBox(*map(float, box)), int(cid))
                for box, cid in zip(rec["boxes"], rec["labels"])
            ]
            lines.append(LineSample(image, gt))
    return lines


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    support: dict[int, list[Glyph]]  # class_id -> K crops
    queries: list[LineSample]
    n_way: int
    k_shot: int


def sample_episode(
    atlas: Atlas,
    split: str,
    n_way: int,
    k_shot: int,
    rng: np.random.Generator,
    cfg: ComposeConfig | None = None,
    n_query_lines: int = 2,
    min_symbols: int | None = None,
    max_symbols: int | None = None,
) -> Episode:
    """Draw N classes without replacement, K supports each, and query lines
    composed from the chosen classes' query pools."""
    cfg = cfg or ComposeConfig()
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    class_ids = atlas.class_ids(split)
    if len(class_ids) < n_way:
        raise AtlasError(f"split {split!r} has {len(class_ids)} classes, need {n_way}")
    chosen = sorted(int(c) for c in rng.choice(class_ids, size=n_way, replace=False))
    support: dict[int, list[Glyph]] = {}
    for cid in chosen:
        pool = atlas.classes[cid].support_pool
        if len(pool) < k_shot:
            raise AtlasError(f"class {cid} support pool has {len(pool)} samples, need {k_shot}")
        picks = rng.choice(len(pool), size=k_shot, replace=False)
        support[cid] = [pool[int(i)] for i in picks]
    lo = min_symbols if min_symbols is not None else cfg.min_symbols
    hi = max_symbols if max_symbols is not None else cfg.max_symbols
    queries = []
    # distribute the mandatory one-appearance-per-class over the query lines
    required = [chosen[i::n_query_lines] for i in range(n_query_lines)]
    for q in range(n_query_lines):
        n_symbols = int(rng.integers(max(lo, len(required[q])), hi + 1))
        glyphs = _draw_query_glyphs(atlas, chosen, n_symbols, rng, cfg, required=required[q])
        queries.append(compose_line(glyphs, rng, cfg))
    return Episode(support, queries, n_way, k_shot)


def normalize_canvas(image: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize of trimmed ink onto a size x size canvas."""
    img = trim_to_ink(image)
    h, w = img.shape
    s = size / max(h, w)
    if s != 1.0:
        img = _rebinarize(ndimage.zoom(img, s, order=1))
        if not np.any(img > 0):
            img = trim_to_ink(image)  # zoom degenerated; fall back
        img = img[:size, :size]
    h, w = img.shape
    canvas = np.zeros((size, size), dtype=np.float32)
    top = (size - h) // 2
    left = (size - w) // 2
    canvas[top : top + h, left : left + w] = img
    return canvas
