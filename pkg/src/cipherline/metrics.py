"""Symbol Error Rate, missing-symbol rate, detection recall, and the
confidence-sweep report."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datagen import LineSample
from .decoder import Transcription, decode_line
from .geometry import BBox, iou_matrix
from .inference import CandidateTable, detect_alphabet

__all__ = ["EvalReport", "ser", "missing_rate", "recall_at_iou", "sweep", "EvalLine"]

MISSING = None  # wildcard token in a prediction sequence


def _pred_sequence(pred) -> list[object]:
    if isinstance(pred, Transcription):
        return pred.symbols()
    return list(pred)


def ser(gt: Sequence[object], pred) -> tuple[float, int, int, int]:
    """Symbol Error Rate (S + D + I) / N via Levenshtein alignment.

    A MISSING prediction (None) aligns to any single ground-truth symbol at
    zero cost: those slots are handed to a human, not counted as errors.
    Returns (SER, substitutions, deletions, insertions).
    """
    gt = list(gt)
    if not gt:
        raise ValueError("ser: empty ground truth")
    ps = _pred_sequence(pred)
    n, m = len(gt), len(ps)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = 0 if (ps[j - 1] is MISSING or ps[j - 1] == gt[i - 1]) else 1
            dist[i, j] = min(dist[i - 1, j - 1] + sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    # traceback one optimal decomposition, preferring diagonal moves
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            sub = 0 if (ps[j - 1] is MISSING or ps[j - 1] == gt[i - 1]) else 1
            if dist[i, j] == dist[i - 1, j - 1] + sub:
                s += sub
                i -= 1
                j -= 1
                continue
        if i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return (s + d + ins) / n, s, d, ins


def missing_rate(gt: Sequence[object], pred) -> float:
    """MISSING tokens per ground-truth symbol, capped at 1."""
    gt = list(gt)
    if not gt:
        raise ValueError("missing_rate: empty ground truth")
    n_missing = sum(1 for t in _pred_sequence(pred) if t is MISSING)
    return min(1.0, n_missing / len(gt))


def recall_at_iou(
    gt: Sequence[tuple[BBox, int]],
    table: CandidateTable,
    iou_threshold: float = 0.5,
) -> float:
    """Fraction of GT boxes matched one-to-one (greedy by score) by a
    same-class detection with IoU >= threshold. Diagnostic metric."""
    if not gt:
        return 1.0
    matched = np.zeros(len(gt), dtype=bool)
    for cid in sorted(table.detections):
        gt_idx = [i for i, (_, c) in enumerate(gt) if c == cid]
        if not gt_idx:
            continue
        gt_arr = np.array([gt[i][0].as_tuple() for i in gt_idx])
        dets = sorted(
            table.detections[cid], key=lambda d: (-d.score, d.box.x1, d.box.y1)
        )
        taken = np.zeros(len(gt_idx), dtype=bool)
        for det in dets:
            ious = iou_matrix(np.array([det.box.as_tuple()]), gt_arr)[0]
            ious[taken] = -1.0
            best = int(ious.argmax())
            if ious[best] >= iou_threshold:
                taken[best] = True
                matched[gt_idx[best]] = True
    return float(matched.mean())


@dataclass
class EvalReport:
    tau: float
    ser: float
    missing: float
    substitutions: int
    deletions: int
    insertions: int
    n_gt: int
    recall: float

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "SER": self.ser,
            "missing": self.missing,
            "S": self.substitutions,
            "D": self.deletions,
            "I": self.insertions,
            "N": self.n_gt,
            "recall": self.recall,
        }


@dataclass
class EvalLine:
    """One evaluation unit: a line image with its GT transcription/boxes."""

    image: np.ndarray
    labels: list[int]
    boxes: list[BBox] = field(default_factory=list)

    @classmethod
    def from_line_sample(cls, line: LineSample) -> "EvalLine":
        return cls(line.image, [cid for _, cid in line.gt], [b for b, _ in line.gt])


def sweep(
    corpus: Sequence[EvalLine],
    model,
    supports: Mapping[int, Sequence[np.ndarray]],
    thresholds: Sequence[float] = (0.4, 0.6, 0.8),
    interruption_px: int | None = None,
) -> list[EvalReport]:
    """Detect once per line, decode at every threshold, micro-average."""
    interruption = interruption_px if interruption_px is not None else model.cfg.interruption_px
    tables = [detect_alphabet(line.image, supports, model) for line in corpus]
    reports = []
    for tau in thresholds:
        s_tot = d_tot = i_tot = n_tot = 0
        miss_tot = 0
        recalls = []
        for line, table in zip(corpus, tables):
            if not line.labels:
                continue
            transcription = decode_line(table, tau, interruption)
            _, s, d, ins = ser(line.labels, transcription)
            s_tot += s
            d_tot += d
            i_tot += ins
            n_tot += len(line.labels)
            miss_tot += sum(1 for t in transcription.symbols() if t is MISSING)
            if line.boxes:
                recalls.append(recall_at_iou(list(zip(line.boxes, line.labels)), table))
        reports.append(
            EvalReport(
                tau=tau,
                ser=(s_tot + d_tot + i_tot) / n_tot if n_tot else 0.0,
                missing=min(1.0, miss_tot / n_tot) if n_tot else 0.0,
                substitutions=s_tot,
                deletions=d_tot,
                insertions=i_tot,
                n_gt=n_tot,
                recall=float(np.mean(recalls)) if recalls else 0.0,
            )
        )
    return reports


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, meta: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"meta": meta or {}, "reports": [r.to_dict() for r in reports]}
    with open(out / "report.json", "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tau", "SER", "missing", "S", "D", "I", "N", "recall"])
        for r in reports:
            w.writerow([r.tau, r.ser, r.missing, r.substitutions, r.deletions, r.insertions, r.n_gt, r.recall])
