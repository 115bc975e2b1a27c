"""Puzzle records: Lichess CSV ingest, model-based filtering, subsplits, JSONL storage.

A record's `fen` is the position the solving side faces; `pv` lists the
principal variation from there in UCI (absolute frame). Odd moves (1, 3, ...)
belong to the solver, even ones to the opponent.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .chess.board import Board, FenError, IllegalMoveError, orient_to_player, parse_fen, play
from .chess.squares import SYMBOL_KINDS, Move, mirror_square
from .corruptions import CorruptionCandidate

log = logging.getLogger(__name__)

DATASET_FORMAT = "chessinterp-puzzles"
DATASET_VERSION = 1
REQUIRED_COLUMNS = ("PuzzleId", "FEN", "Moves", "Rating")
SAME_TARGET, DIFFERENT_TARGET = "same_target", "different_target"


class DatasetError(ValueError):
    pass


@dataclass
class PuzzleRecord:
    id: str
    fen: str
    pv: tuple  # of Move, absolute frame
    rating: int = 0
    corruption: Optional[CorruptionCandidate] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pv = tuple(Move.from_uci(m) if isinstance(m, str) else m for m in self.pv)

    @cached_property
    def board(self) -> Board:
        return parse_fen(self.fen)

    @cached_property
    def states(self) -> list:
        """Absolute boards before each PV move, plus the final position."""
        return play(self.board, self.pv)

    @property
    def best_move(self) -> Move:
        return self.pv[0]

    def move_in_player_frame(self, j: int) -> Move:
        """PV move j (1-based) in the frame of the side playing it."""
        m = self.pv[j - 1]
        return m.mirror() if not self.states[j - 1].white_to_move else m

    def move_in_root_frame(self, j: int) -> Move:
        """PV move j in the frame the model sees at the puzzle's root position."""
        m = self.pv[j - 1]
        return m.mirror() if not self.board.white_to_move else m

    def s(self, j: int) -> int:
        return self.move_in_player_frame(j).source

    def t(self, j: int) -> int:
        return self.move_in_player_frame(j).target

    def piece_kind(self, j: int) -> str:
        """Kind of the piece making PV move j ("knight", "rook", ...)."""
        return SYMBOL_KINDS[self.states[j - 1].pieces[self.pv[j - 1].source].lower()]

    @property
    def squares(self) -> dict:
        out = {}
        for j in range(1, min(3, len(self.pv)) + 1):
            out[f"s{j}"], out[f"t{j}"] = self.s(j), self.t(j)
        return out

    @property
    def root_squares(self) -> dict:
        """s_j/t_j for j <= 3, all in the frame the model sees at the root position."""
        out = {}
        for j in range(1, min(3, len(self.pv)) + 1):
            m = self.move_in_root_frame(j)
            out[f"s{j}"], out[f"t{j}"] = m.source, m.target
        return out

    def corrupted_squares(self) -> tuple:
        """Squares touched by the corruption, in the root player frame."""
        if self.corruption is None:
            return ()
        sq = self.corruption.mutation.squares()
        return tuple(s if self.board.white_to_move else mirror_square(s) for s in sq)

    @property
    def subsplit(self) -> str:
        return subsplit(self)

    def to_dict(self) -> dict:
        d = {"id": self.id, "fen": self.fen, "pv": [m.uci() for m in self.pv], "rating": self.rating,
             "subsplit": self.subsplit if len(self.pv) >= 2 else None,
             "squares": self.squares}
        if self.corruption is not None:
            d["corruption"] = self.corruption.to_dict()
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PuzzleRecord":
        corr = d.get("corruption")
        return cls(d["id"], d["fen"], tuple(d["pv"]), int(d.get("rating", 0)),
                   None if corr is None else CorruptionCandidate.from_dict(corr), dict(d.get("meta", {})))


def validate_record(rec: PuzzleRecord, min_pv: int = 3) -> Optional[str]:
    """None if the record is usable, else a skip reason."""
    if len(rec.pv) < min_pv:
        return "short-pv"
    try:
        rec.board
    except FenError:
        return "bad-fen"
    try:
        rec.states
    except IllegalMoveError:
        return "illegal-pv"
    # frame bookkeeping: each player-frame move is legal in the oriented state
    for j in range(1, len(rec.pv) + 1):
        if not orient_to_player(rec.states[j - 1]).is_legal(rec.move_in_player_frame(j)):
            return "frame-mismatch"
    return None


# -- ingest ---------------------------------------------------------------------------


@dataclass
class IngestResult:
    records: list
    skipped: list  # (row number, puzzle id, reason)
    rows: int

    @property
    def reason_counts(self) -> dict:
        out = {}
        for _, _, r in self.skipped:
            out[r] = out.get(r, 0) + 1
        return out


def _parse_row(row: dict, setup_move: bool, min_pv: int):
    pid = (row.get("PuzzleId") or "").strip()
    if not pid:
        return None, "missing-id"
    try:
        moves = [Move.from_uci(t) for t in (row.get("Moves") or "").split()]
    except ValueError:
        return None, "bad-move-syntax"
    try:
        board = parse_fen(row.get("FEN", ""))
    except FenError:
        return None, "bad-fen"
    try:
        rating = int(row.get("Rating") or 0)
    except ValueError:
        return None, "bad-rating"
    if setup_move:
        if not moves:
            return None, "short-pv"
        if not board.is_legal(moves[0]):
            return None, "illegal-pv"
        board = board.apply_move(moves[0])
        moves = moves[1:]
    rec = PuzzleRecord(pid, board.fen(), tuple(moves), rating)
    reason = validate_record(rec, min_pv)
    return (None, reason) if reason else (rec, None)


def ingest_lichess_csv(path, setup_move: bool = True, min_pv: int = 3) -> IngestResult:
    """Parse a Lichess puzzle CSV.

    Lichess FENs are given before the opponent's setup move, which is the first
    entry of Moves. With setup_move=True that move is applied and dropped, so
    the record starts at the solver's turn.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from None
    records, skipped, n = [], [], 0
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: header lacks columns {missing}")
        for n, row in enumerate(reader, start=1):
            rec, reason = _parse_row(row, setup_move, min_pv)
            if rec is None:
                log.info("skip row %d (%s): %s", n, row.get("PuzzleId"), reason)
                skipped.append((n, row.get("PuzzleId"), reason))
            else:
                records.append(rec)
    return IngestResult(records, skipped, n)


# -- filtering ------------------------------------------------------------------------


@dataclass(frozen=True)
class PuzzleThresholds:
    weak_threshold: float = 0.10
    strong_threshold: float = 0.50
    opponent_threshold: float = 0.50


@dataclass
class FilterDecision:
    keep: bool
    reason: Optional[str] = None
    move_index: Optional[int] = None
    strong_probs: tuple = ()
    weak_probs: tuple = ()

    def to_dict(self) -> dict:
        return {"keep": self.keep, "reason": self.reason, "move_index": self.move_index,
                "strong_probs": list(self.strong_probs), "weak_probs": list(self.weak_probs)}


def decide(strong_probs, weak_probs, th: PuzzleThresholds = PuzzleThresholds()) -> FilterDecision:
    """Apply the three conditions to per-move probabilities (index 0 = move 1)."""
    player = range(0, len(strong_probs), 2)
    for i in player:
        if weak_probs[i] > th.weak_threshold:
            return FilterDecision(False, "weak-too-strong", i + 1, tuple(strong_probs), tuple(weak_probs))
    for i in player:
        if strong_probs[i] < th.strong_threshold:
            return FilterDecision(False, "strong-too-weak", i + 1, tuple(strong_probs), tuple(weak_probs))
    if len(weak_probs) > 1 and weak_probs[1] < th.opponent_threshold:
        return FilterDecision(False, "opponent-not-forced", 2, tuple(strong_probs), tuple(weak_probs))
    return FilterDecision(True, None, None, tuple(strong_probs), tuple(weak_probs))


def filter_puzzle(strong, weak, rec: PuzzleRecord, th: PuzzleThresholds = PuzzleThresholds()) -> FilterDecision:
    """Each model sees the state in which each PV move is played."""
    states = rec.states[:-1]
    s_ev = strong.evaluate_many(states)
    w_ev = weak.evaluate_many(states)
    sp = [e.prob(m) for e, m in zip(s_ev, rec.pv)]
    wp = [e.prob(m) for e, m in zip(w_ev, rec.pv)]
    return decide(sp, wp, th)


def subsplit(rec: PuzzleRecord) -> str:
    """same_target iff moves 1 and 2 land on the same (absolute) square."""
    if len(rec.pv) < 2:
        raise DatasetError(f"{rec.id}: subsplit needs two PV moves")
    return SAME_TARGET if rec.pv[0].target == rec.pv[1].target else DIFFERENT_TARGET


# -- persistence ------------------------------------------------------------------------


def save_dataset(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION}) + "\n")
        for rec in sorted(records, key=lambda r: r.id):
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_dataset(path, min_pv: int = 3) -> list:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset {path} not found")
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline() or "{}")
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise DatasetError(f"{path}: expected {DATASET_FORMAT} v{DATASET_VERSION}, got {header}")
        out = []
        for n, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = PuzzleRecord.from_dict(json.loads(line))
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{n}: malformed record ({e})") from None
            reason = validate_record(rec, min_pv)
            if reason:
                raise DatasetError(f"{path}:{n}: record {rec.id} rejected ({reason})")
            out.append(rec)
    return sorted(out, key=lambda r: r.id)


def dataset_hash(records) -> str:
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.id):
        h.update(json.dumps(rec.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def split_dataset(records, seed: int = 0, train_fraction: float = 0.7) -> tuple[list, list]:
    """Seeded shuffle of the id-sorted records, then a train/eval cut."""
    recs = sorted(records, key=lambda r: r.id)
    order = np.random.default_rng(seed).permutation(len(recs))
    cut = int(round(train_fraction * len(recs)))
    train = sorted((recs[i] for i in order[:cut]), key=lambda r: r.id)
    test = sorted((recs[i] for i in order[cut:]), key=lambda r: r.id)
    return train, test


def limit(records, n: Optional[int]) -> list:
    """First n records by sorted id (None: all)."""
    recs = sorted(records, key=lambda r: r.id)
    return recs if n is None else recs[:n]
