"""Piece-movement head detection and the max-entry statistic."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .chess.board import orient_to_player
from .chess.masks import kind_matrix

KINDS = ("knight", "bishop", "rook")
TARGET_TAG_COUNTS = {"knight": 22, "bishop": 27, "rook": 29}


@dataclass(frozen=True)
class HeadTag:
    layer: int  # 0-based
    head: int
    piece_kind: str
    score: float

    @property
    def label(self) -> str:
        return f"L{self.layer + 1}H{self.head + 1}"

    def to_dict(self) -> dict:
        return {"layer": self.layer + 1, "head": self.head + 1, "kind": self.piece_kind, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadTag":
        return cls(int(d["layer"]) - 1, int(d["head"]) - 1, d["kind"], float(d["score"]))


def save_tags(path, tags) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tags], indent=1), encoding="utf-8")


def load_tags(path) -> list:
    return [HeadTag.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def query_square(board, seed: int) -> int:
    """Random query square for one board, seeded by (seed, FEN) so sample order is irrelevant."""
    h = hashlib.sha256(f"{seed}:{board.fen()}".encode()).digest()
    return int.from_bytes(h[:8], "little") % 64


def piece_head_scores(model, boards, seed: int = 0, batch: int = 16) -> np.ndarray:
    """(n_layers, n_heads, 3) mean post-softmax mass on knight/bishop/rook-reachable keys."""
    boards = [orient_to_player(b) for b in boards]
    masks = np.stack([kind_matrix(k) for k in KINDS]).astype(np.float64)  # (3, 64, 64)
    spec = model.spec
    total = np.zeros((spec.n_layers, spec.n_heads, len(KINDS)))
    for i in range(0, len(boards), batch):
        chunk = boards[i:i + batch]
        res = model.run(model.features(chunk), trace="full")
        for j, b in enumerate(chunk):
            q = query_square(b, seed)
            rows = res.trace.attn[j][:, :, q, :].astype(np.float64)  # (L, H, 64)
            total += np.einsum("lhk,ck->lhc", rows, masks[:, q, :])
    return total / max(len(boards), 1)


def piece_head_score(model, boards, layer: int, head: int, kind: str, seed: int = 0) -> float:
    return float(piece_head_scores(model, boards, seed)[layer, head, KINDS.index(kind)])


def tags_from_scores(scores: np.ndarray, threshold: float) -> list:
    out = []
    L, H, _ = scores.shape
    for layer in range(L):
        for head in range(H):
            k = int(np.argmax(scores[layer, head]))
            if scores[layer, head, k] > threshold:
                out.append(HeadTag(layer, head, KINDS[k], float(scores[layer, head, k])))
    return out


def detect_piece_heads(model, boards, threshold: float, seed: int = 0) -> list:
    """Heads whose best-kind score exceeds the threshold, one tag per head."""
    return tags_from_scores(piece_head_scores(model, boards, seed), threshold)


def count_by_kind(tags) -> dict:
    out = {k: 0 for k in KINDS}
    for t in tags:
        out[t.piece_kind] += 1
    return out


def calibrate_threshold(scores: np.ndarray, targets: dict = TARGET_TAG_COUNTS) -> tuple[float, dict]:
    """Threshold whose per-kind tag counts are closest (L1) to the targets.

    Candidates are midpoints between consecutive distinct best-kind scores; ties
    go to the larger threshold (fewer tags).
    """
    best = np.sort(np.unique(scores.max(axis=2)))
    cands = np.concatenate([[0.0], (best[:-1] + best[1:]) / 2, [min(1.0, best[-1] + 1e-9)]])
    choice, err, counts = None, None, None
    for th in cands[::-1]:
        c = count_by_kind(tags_from_scores(scores, th))
        e = sum(abs(c[k] - targets.get(k, 0)) for k in KINDS)
        if err is None or e < err:
            choice, err, counts = float(th), e, c
    return choice, counts


@dataclass
class MaxEntryResult:
    fraction: float
    n: int
    skipped: int
    flags: dict  # puzzle id -> bool

    def to_dict(self) -> dict:
        return asdict(self)


def max_entry_statistic(model, dataset, layer: int, head: int, batch: int = 16) -> MaxEntryResult:
    """Fraction of puzzles whose (query=t1, key=t3) pre-softmax score is the head's strict maximum.

    Puzzles with t1 == t3 are skipped.
    """
    recs = [r for r in dataset if r.t(1) != r.t(3)]
    flags = {}
    for i in range(0, len(recs), batch):
        chunk = recs[i:i + batch]
        res = model.run(model.features([orient_to_player(r.board) for r in chunk]), trace="full")
        scores = res.trace.qk_scores[:, layer, head] + res.trace.smolgen_scores[:, layer, head]
        for j, r in enumerate(chunk):
            s = scores[j]
            v = s[r.t(1), r.t(3)]
            flags[r.id] = bool((s >= v).sum() == 1)
    n = len(flags)
    return MaxEntryResult(sum(flags.values()) / n if n else float("nan"), n, len(dataset) - n, flags)
