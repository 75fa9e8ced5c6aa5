"""Per-alphabet detection: run the detector once per support class over a
line and assemble the candidate table consumed by the decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .detector import SiameseDetector
from .geometry import Detection

__all__ = ["CandidateTable", "detect_alphabet", "filter_confidence"]


@dataclass
class CandidateTable:
    """Post-NMS, pre-confidence detections for every class of an alphabet."""

    line_width: int
    detections: dict[int, list[Detection]]  # class_id -> sorted by x1
    tau: float | None = None  # set by filter_confidence

    def __post_init__(self):
        for cid, dets in self.detections.items():
            self.detections[cid] = sorted(dets, key=lambda d: (d.box.x1, d.box.y1, d.score))

    def all_detections(self) -> list[Detection]:
        out = []
        for cid in sorted(self.detections):
            out.extend(self.detections[cid])
        return out

    def eligible(self, det: Detection) -> bool:
        """Whether the detection may be emitted as a SYMBOL (score >= tau)."""
        return self.tau is None or det.score >= self.tau

    def eligible_count(self) -> int:
        return sum(self.eligible(d) for d in self.all_detections())

    def to_dict(self) -> dict:
        return {
            "line_width": self.line_width,
            "tau": self.tau,
            "classes": {
                str(cid): [
                    {
                        "x1": d.box.x1,
                        "y1": d.box.y1,
                        "x2": d.box.x2,
                        "y2": d.box.y2,
                        "score": d.score,
                    }
                    for d in dets
                ]
                for cid, dets in sorted(self.detections.items())
            },
        }


def detect_alphabet(
    line: np.ndarray,
    supports: Mapping[int, Sequence[np.ndarray]],
    model: SiameseDetector,
) -> CandidateTable:
    """forward_detect per support class; detections below the score floor are
    dropped to bound the table size."""
    if not supports:
        raise ValueError("detect_alphabet: need at least one support class")
    table: dict[int, list[Detection]] = {}
    for cid in sorted(supports):
        if not supports[cid]:
            raise ValueError(f"detect_alphabet: class {cid} has no support crops")
        dets = model.forward_detect(line, supports[cid], class_id=cid)
        table[cid] = [d for d in dets if d.score >= model.cfg.score_floor]
    return CandidateTable(line_width=line.shape[1], detections=table)


def filter_confidence(table: CandidateTable, tau: float) -> CandidateTable:
    """Mark the emission threshold. Below-threshold detections are retained
    (the decoder positions MISSING tokens with them); eligibility for SYMBOL
    emission becomes score >= tau."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"confidence threshold must be in [0, 1], got {tau}")
    return replace(table, detections={k: list(v) for k, v in table.detections.items()}, tau=tau)
