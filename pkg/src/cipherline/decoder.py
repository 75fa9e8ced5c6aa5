"""Left-to-right decoding of a candidate table into a symbol sequence.

Column-sweep semantics: every pixel column is owned by the highest-scoring
detection covering it; each detection keeps its widest constant-owner run;
runs narrower than the interruption threshold are dropped; each surviving
run emits one token, SYMBOL when the score clears the confidence threshold
and MISSING otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .geometry import Detection
from .inference import CandidateTable

__all__ = ["TokenKind", "Token", "Transcription", "decode_line", "transcription_to_string"]


class TokenKind(Enum):
    SYMBOL = "symbol"
    MISSING = "missing"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    class_id: int | None
    score: float
    x_span: tuple[int, int]  # [start, end) pixel columns
    detection_id: int


@dataclass
class Transcription:
    tokens: list[Token]
    tau: float
    line_id: str = ""

    def symbols(self) -> list[object]:
        """Token stream for SER: class ids, with None marking MISSING."""
        return [t.class_id if t.kind is TokenKind.SYMBOL else None for t in self.tokens]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "line_id": self.line_id,
            "tokens": [
                {
                    "kind": t.kind.value,
                    "class": t.class_id,
                    "score": t.score,
                    "x1": t.x_span[0],
                    "x2": t.x_span[1],
                }
                for t in self.tokens
            ],
        }


def _flatten(table: CandidateTable) -> list[Detection]:
    """Detection ids are positions in (class asc, x1 asc) order."""
    return table.all_detections()


def decode_line(table: CandidateTable, tau: float, interruption_px: int = 15) -> Transcription:
    if interruption_px <= 0:
        raise ValueError("interruption_px must be positive")
    dets = _flatten(table)
    width = int(table.line_width)
    if not dets or width <= 0:
        return Transcription([], tau)

    # ownership: priority by score desc, ties by (x1, class, id)
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, dets[i].box.x1, dets[i].class_id, i),
    )
    owner = np.full(width, -1, dtype=np.int64)
    for i in order:
        d = dets[i]
        lo = max(0, int(math.ceil(d.box.x1)))
        hi = min(width - 1, int(math.floor(d.box.x2)))
        if hi < lo:
            continue
        seg = owner[lo : hi + 1]
        seg[seg == -1] = i

    # maximal constant-owner runs
    runs: list[tuple[int, int, int]] = []  # (det_id, start, end_exclusive)
    col = 0
    while col < width:
        o = owner[col]
        start = col
        while col < width and owner[col] == o:
            col += 1
        if o >= 0:
            runs.append((int(o), start, col))

    # one emission per detection: keep the widest run, leftmost on ties
    best: dict[int, tuple[int, int]] = {}
    for det_id, start, end in runs:
        cur = best.get(det_id)
        if cur is None or (end - start) > (cur[1] - cur[0]):
            best[det_id] = (start, end)

    tokens = []
    for det_id, (start, end) in sorted(best.items(), key=lambda kv: kv[1][0]):
        if end - start < interruption_px:
            continue
        d = dets[det_id]
        if d.score >= tau:
            tokens.append(Token(TokenKind.SYMBOL, d.class_id, d.score, (start, end), det_id))
        else:
            tokens.append(Token(TokenKind.MISSING, None, d.score, (start, end), det_id))
    return Transcription(tokens, tau)


def transcription_to_string(t: Transcription, alphabet: Mapping[int, str]) -> str:
    """Space-separated class names; MISSING renders as '?'."""
    parts = []
    for tok in t.tokens:
        if tok.kind is TokenKind.MISSING:
            parts.append("?")
        else:
            if tok.class_id not in alphabet:
                raise KeyError(f"class id {tok.class_id} not in alphabet map")
            parts.append(alphabet[tok.class_id])
    return " ".join(parts)
