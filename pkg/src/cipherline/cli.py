"""Command-line entry points: data generation, training, fine-tuning,
detection, transcription, and evaluation.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .datagen import (
    Atlas,
    AtlasError,
    ComposeConfig,
    SplitSpec,
    generate_corpus,
    load_atlas,
    load_corpus,
    load_glyph_image,
    load_line_image,
    normalize_canvas,
)
from .decoder import decode_line, transcription_to_string
from .detector import ModelConfig
from .inference import detect_alphabet
from .metrics import EvalLine, sweep, write_reports
from .preprocess import binarize, segment_lines
from .training import TrainConfig, fine_tune, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise AtlasError(f"config file not found: {p}")
    with open(p) as f:
        return json.load(f)


def _build_configs(raw: dict, seed: int | None = None):
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_kwargs = dict(raw.get("train", {}))
    if seed is not None:
        train_kwargs["seed"] = seed
    train_cfg = TrainConfig(**train_kwargs)
    compose_cfg = ComposeConfig(**raw.get("compose", {}))
    return model_cfg, train_cfg, compose_cfg


def _config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, compose_cfg: ComposeConfig) -> str:
    payload = json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "compose": compose_cfg.__dict__},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def _default_split(atlas_root: Path) -> SplitSpec:
    alphabets = sorted(p.name for p in atlas_root.iterdir() if p.is_dir())
    return SplitSpec.by_fraction(alphabets)


def _load_atlas_with_split(atlas_root: str, raw_cfg: dict) -> Atlas:
    root = Path(atlas_root)
    if not root.is_dir():
        raise AtlasError(f"atlas root not found: {root}")
    split = raw_cfg.get("split")
    if split:
        spec = SplitSpec(split.get("train", []), split.get("test", []))
    else:
        spec = _default_split(root)
    return load_atlas(root, spec)


def _load_supports(supports_dir: str, model_cfg: ModelConfig, shots: int | None):
    """supports/class_name/shot_*.png; class order = sorted names. Directory
    names that are all integers are used as class ids directly."""
    root = Path(supports_dir)
    if not root.is_dir():
        raise AtlasError(f"supports directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise AtlasError(f"no class directories under {root}")
    numeric = all(d.name.removeprefix("class_").isdigit() for d in class_dirs)
    supports = {}
    names = {}
    for i, cdir in enumerate(class_dirs):
        cid = int(cdir.name.removeprefix("class_")) if numeric else i
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if shots is not None:
            files = files[:shots]
        if not files:
            raise AtlasError(f"class directory {cdir} has no support images")
        supports[cid] = [
            normalize_canvas(load_glyph_image(p), model_cfg.support_size) for p in files
        ]
        names[cid] = cdir.name
    return supports, names


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    raw = _load_config(args.config)
    _, _, compose_cfg = _build_configs(raw)
    atlas = _load_atlas_with_split(args.atlas, raw)
    generate_corpus(atlas, args.lines, args.seed, compose_cfg, args.out, split=args.split)
    print(f"wrote {args.lines} lines to {args.out}")
    return EXIT_OK


def _write_trace(trace, path: Path):
    with open(path, "w") as f:
        f.write("iteration,total,cls,reg\n")
        for it, total, cls, reg in trace:
            f.write(f"{it},{total!r},{cls!r},{reg!r}\n")


def cmd_train(args) -> int:
    raw = _load_config(args.config)
    model_cfg, train_cfg, compose_cfg = _build_configs(raw, seed=args.seed)
    if args.iterations is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "iterations": args.iterations})
    chash = _config_hash(model_cfg, train_cfg, compose_cfg)
    if args.atlas:
        atlas = _load_atlas_with_split(args.atlas, raw)
        result = train(atlas, train_cfg, model_cfg, compose_cfg)
    else:
        # corpus mode: train from scratch on labeled lines, supports cropped from GT
        lines = load_corpus(args.corpus)
        from .detector import SiameseDetector

        init = Checkpoint.from_model(SiameseDetector(model_cfg, seed=train_cfg.seed))
        full_lr = TrainConfig(**{**train_cfg.to_dict(), "finetune_lr_scale": 1.0})
        result = fine_tune(init, [lines], full_lr)
    result.checkpoint.config.update({"seed": train_cfg.seed, "config_hash": chash})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out)
    _write_trace(result.trace, out.with_suffix(out.suffix + ".loss.csv"))
    print(f"checkpoint written to {out} ({len(result.trace)} steps)")
    return EXIT_OK


def cmd_finetune(args) -> int:
    raw = _load_config(args.config)
    ckpt = Checkpoint.load(args.ckpt)
    model_cfg = ModelConfig.from_dict(ckpt.config.get("model", {}))
    _, train_cfg, compose_cfg = _build_configs(raw, seed=args.seed)
    if args.iterations is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "iterations": args.iterations})
    pages_root = Path(args.pages)
    if not pages_root.is_dir():
        raise AtlasError(f"pages directory not found: {pages_root}")
    page_dirs = sorted(p for p in pages_root.iterdir() if (p / "annotations.jsonl").is_file())
    if page_dirs:
        pages = [load_corpus(p) for p in page_dirs]
    elif (pages_root / "annotations.jsonl").is_file():
        pages = [load_corpus(pages_root)]
    else:
        raise AtlasError(f"no annotations.jsonl found under {pages_root}")
    result = fine_tune(ckpt, pages, train_cfg)
    chash = _config_hash(model_cfg, train_cfg, compose_cfg)
    result.checkpoint.config.update({"seed": train_cfg.seed, "config_hash": chash})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out)
    _write_trace(result.trace, out.with_suffix(out.suffix + ".loss.csv"))
    print(f"fine-tuned checkpoint written to {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.to_model()
    supports, names = _load_supports(args.supports, model.cfg, args.shots)
    line = load_line_image(args.line)
    table = detect_alphabet(line, supports, model)
    payload = table.to_dict()
    payload["class_names"] = {str(k): v for k, v in names.items()}
    payload["meta"] = {"config_hash": ckpt.config.get("config_hash"), "seed": ckpt.config.get("seed")}
    with open(args.out, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    n = sum(len(v) for v in table.detections.values())
    print(f"{n} candidate detections written to {args.out}")
    return EXIT_OK


def cmd_transcribe(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.to_model()
    supports, names = _load_supports(args.supports, model.cfg, args.shots)
    if args.page:
        # page inputs arrive as raw grayscale scans; binarize then segment
        from PIL import Image

        raw = np.asarray(Image.open(args.page).convert("L"), dtype=np.float64)
        lines = segment_lines(binarize(raw))
    else:
        lines = [load_line_image(args.line)]
    out_records = []
    texts = []
    for i, line in enumerate(lines):
        table = detect_alphabet(line, supports, model)
        t = decode_line(table, args.confidence, model.cfg.interruption_px)
        t.line_id = str(i)
        out_records.append(t.to_dict())
        texts.append(transcription_to_string(t, names))
    payload = {
        "transcriptions": out_records,
        "text": texts,
        "meta": {
            "confidence": args.confidence,
            "config_hash": ckpt.config.get("config_hash"),
            "seed": ckpt.config.get("seed"),
        },
    }
    with open(args.out, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    for text in texts:
        print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.to_model()
    supports, _ = _load_supports(args.supports, model.cfg, args.shots)
    corpus = [EvalLine.from_line_sample(line) for line in load_corpus(args.corpus)]
    thresholds = [float(t) for t in args.thresholds.split(",")]
    for t in thresholds:
        if not (0.0 <= t <= 1.0):
            raise AtlasError(f"threshold out of range: {t}")
    reports = sweep(corpus, model, supports, thresholds)
    meta = {
        "seed": args.seed,
        "config_hash": ckpt.config.get("config_hash"),
        "thresholds": thresholds,
        "shots": args.shots,
    }
    write_reports(reports, args.out, meta)
    for r in reports:
        print(f"tau={r.tau:.2f} SER={r.ser:.4f} missing={r.missing:.4f} recall={r.recall:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cipherline",
        description="Few-shot symbol detection and transcription for ciphered manuscript lines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic line corpus")
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lines", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the detector episodically")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--atlas")
    src.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on labeled pages")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pages", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("detect", help="detect all support classes on one line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--line", required=True)
    p.add_argument("--supports", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("transcribe", help="transcribe a line or page image")
    p.add_argument("--ckpt", required=True)
    tgt = p.add_mutually_exclusive_group(required=True)
    tgt.add_argument("--line")
    tgt.add_argument("--page")
    p.add_argument("--supports", required=True)
    p.add_argument("--confidence", type=float, default=0.4)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("eval", help="confidence-sweep evaluation on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--supports", required=True)
    p.add_argument("--thresholds", default="0.4,0.6,0.8")
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AtlasError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
