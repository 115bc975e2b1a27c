"""Corrupted-board search: single mutations, three filters, JSD-minimal pick.

Mutations work on absolute-frame boards. Every mutated board has its
en-passant square cleared; moving a king or rook drops the castling rights
that depended on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .chess.board import Board, parse_fen
from .chess.squares import Move, parse_square, square_name

MUTATION_KINDS = ("add_pawn", "remove_pawn", "move_piece")
LOG_ODDS_FLOOR = 1e-9

# castling right -> squares whose piece must stay put
_RIGHT_HOMES = {"K": (4, 7), "Q": (4, 0), "k": (60, 63), "q": (60, 56)}


class NoCorruptionFound(LookupError):
    pass


@dataclass(frozen=True)
class Mutation:
    kind: str
    square: int  # added/removed pawn square, or the destination of a moved piece
    color: Optional[str] = None  # add_pawn only: "w" or "b"
    origin: Optional[int] = None  # move_piece only

    def __post_init__(self):
        if self.kind not in MUTATION_KINDS:
            raise ValueError(f"unknown mutation {self.kind!r}")
        if (self.kind == "add_pawn") != (self.color is not None):
            raise ValueError("color is required for add_pawn and only for it")
        if (self.kind == "move_piece") != (self.origin is not None):
            raise ValueError("origin is required for move_piece and only for it")

    @property
    def sort_key(self) -> tuple:
        """Serialization order: family, then squares ascending."""
        return (MUTATION_KINDS.index(self.kind), self.color or "", self.origin or 0, self.square)

    def squares(self) -> tuple:
        """Squares whose contents change (absolute frame)."""
        return (self.square,) if self.origin is None else (self.origin, self.square)

    def __str__(self) -> str:
        if self.kind == "add_pawn":
            return f"add_pawn({self.color},{square_name(self.square)})"
        if self.kind == "remove_pawn":
            return f"remove_pawn({square_name(self.square)})"
        return f"move_piece({square_name(self.origin)},{square_name(self.square)})"

    @classmethod
    def parse(cls, text: str) -> "Mutation":
        kind, _, rest = text.partition("(")
        args = rest.rstrip(")").split(",")
        if kind == "add_pawn":
            return cls(kind, parse_square(args[1]), color=args[0])
        if kind == "remove_pawn":
            return cls(kind, parse_square(args[0]))
        if kind == "move_piece":
            return cls(kind, parse_square(args[1]), origin=parse_square(args[0]))
        raise ValueError(f"cannot parse mutation {text!r}")

    def apply(self, board: Board) -> Board:
        pieces = list(board.pieces)
        castling = board.castling
        if self.kind == "add_pawn":
            if pieces[self.square] is not None:
                raise ValueError(f"{self}: square occupied")
            pieces[self.square] = "P" if self.color == "w" else "p"
        elif self.kind == "remove_pawn":
            if pieces[self.square] not in ("P", "p"):
                raise ValueError(f"{self}: no pawn there")
            pieces[self.square] = None
        else:
            piece = pieces[self.origin]
            if piece is None or piece in "Pp" or pieces[self.square] is not None:
                raise ValueError(f"{self}: needs a non-pawn piece moving to an empty square")
            pieces[self.origin], pieces[self.square] = None, piece
        castling = "".join(r for r in castling
                           if all(board.pieces[s] == pieces[s] for s in _RIGHT_HOMES[r]))
        return replace(board, pieces=tuple(pieces), castling=castling, ep=None)


@dataclass
class CorruptionCandidate:
    board: Board
    mutation: Mutation
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"fen": self.board.fen(), "mutation": str(self.mutation), "diagnostics": dict(self.diagnostics)}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionCandidate":
        return cls(parse_fen(d["fen"]), Mutation.parse(d["mutation"]), dict(d.get("diagnostics", {})))


def _pawn_rank_ok(sq: int) -> bool:
    return 1 <= sq // 8 <= 6


def generate_candidates(clean: Board, include_terminal: bool = False) -> list[CorruptionCandidate]:
    """All legal single-mutation boards, in serialization order.

    Positions where the side to move has no legal move are dropped unless
    include_terminal is set (they have no move distribution to compare).
    """
    if clean.orientation != "absolute":
        clean = clean.to_absolute()
    muts = []
    empty = [sq for sq in range(64) if clean.pieces[sq] is None]
    for color in ("b", "w"):
        muts += [Mutation("add_pawn", sq, color=color) for sq in empty if _pawn_rank_ok(sq)]
    muts += [Mutation("remove_pawn", sq) for sq in range(64) if clean.pieces[sq] in ("P", "p")]
    for origin in range(64):
        piece = clean.pieces[origin]
        if piece is None or piece in "Pp":
            continue
        muts += [Mutation("move_piece", sq, origin=origin) for sq in empty]
    muts.sort(key=lambda m: m.sort_key)
    out = []
    for m in muts:
        b = m.apply(clean)
        if b.illegality() is not None:
            continue
        if not include_terminal and not b.legal_moves():
            continue
        out.append(CorruptionCandidate(b, m))
    return out


def _as_mapping(dist) -> dict:
    if hasattr(dist, "as_dict"):
        return dist.as_dict()
    return dict(dist)


def jensen_shannon(p, q) -> float:
    """JSD in nats over the union of supports (missing entries count as 0)."""
    p, q = _as_mapping(p), _as_mapping(q)
    keys = sorted(set(p) | set(q))
    a = np.array([p.get(k, 0.0) for k in keys], dtype=np.float64)
    b = np.array([q.get(k, 0.0) for k in keys], dtype=np.float64)
    a, b = a / a.sum(), b / b.sum()
    s = a + b  # twice the mixture; 2x/s is exact 1 where a == b and never 0/0

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(2.0 * x[nz] / s[nz])))

    return max(0.0, 0.5 * kl(a) + 0.5 * kl(b))


def clamped_log_odds(p: float) -> tuple[float, bool]:
    c = min(max(p, LOG_ODDS_FLOOR), 1.0 - LOG_ODDS_FLOOR)
    return math.log(c / (1.0 - c)), c != p


@dataclass(frozen=True)
class FilterSettings:
    """Thresholds and per-filter toggles (a: strong flips, b: weak stays, c: value stays)."""

    strong_max_prob: float = 0.10
    weak_max_drop: float = 0.2
    value_max_gain: float = 0.1
    use_a: bool = True
    use_b: bool = True
    use_c: bool = True


def filter_decision(diag: dict, settings: FilterSettings = FilterSettings()) -> dict:
    """Per-filter pass flags from a diagnostics dict; key "keep" is their conjunction."""
    a = diag["strong_prob_corrupted"] < settings.strong_max_prob
    b = diag["weak_log_odds_clean"] - diag["weak_log_odds_corrupted"] <= settings.weak_max_drop
    c = diag["strong_value_corrupted"] - diag["strong_value_clean"] <= settings.value_max_gain
    keep = (a or not settings.use_a) and (b or not settings.use_b) and (c or not settings.use_c)
    return {"pass_a": bool(a), "pass_b": bool(b), "pass_c": bool(c), "keep": bool(keep)}


def evaluate_candidates(strong, weak, clean: Board, best: Move, candidates) -> list[CorruptionCandidate]:
    """Fill each candidate's diagnostics (probabilities, log-odds, values, weak JSD)."""
    boards = [clean] + [c.board for c in candidates]
    s_eval = strong.evaluate_many(boards)
    w_eval = weak.evaluate_many(boards)
    s0, w0 = s_eval[0], w_eval[0]
    w_lo_clean, _ = clamped_log_odds(w0.prob(best))
    out = []
    for cand, se, we in zip(candidates, s_eval[1:], w_eval[1:]):
        w_lo, clamped = clamped_log_odds(we.prob(best))
        diag = {
            "strong_prob_clean": s0.prob(best),
            "strong_prob_corrupted": se.prob(best),
            "weak_log_odds_clean": w_lo_clean,
            "weak_log_odds_corrupted": w_lo,
            "weak_clamped": clamped,
            "strong_value_clean": s0.value,
            "strong_value_corrupted": se.value,
            "weak_jsd": jensen_shannon(w0.dist, we.dist),
            "best_legal": cand.board.is_legal(best),
        }
        out.append(CorruptionCandidate(cand.board, cand.mutation, diag))
    return out


def filter_candidates(strong, weak, puzzle, candidates, settings: FilterSettings = FilterSettings()) -> list:
    """Survivors of filters (a), (b), (c); diagnostics carry the per-filter flags."""
    clean, best = puzzle.board, puzzle.best_move
    scored = evaluate_candidates(strong, weak, clean, best, candidates)
    keep = []
    for cand in scored:
        cand.diagnostics.update(filter_decision(cand.diagnostics, settings))
        if cand.diagnostics["keep"]:
            keep.append(cand)
    return keep


def select_corruption(weak, clean: Board, survivors) -> CorruptionCandidate:
    """Survivor with the smallest weak-model JSD; ties go to the earlier mutation."""
    survivors = list(survivors)
    if not survivors:
        raise NoCorruptionFound("no candidate survived the filters")
    need = [c for c in survivors if "weak_jsd" not in c.diagnostics]
    if need:
        evals = weak.evaluate_many([clean] + [c.board for c in need])
        for c, e in zip(need, evals[1:]):
            c.diagnostics["weak_jsd"] = jensen_shannon(evals[0].dist, e.dist)
    return min(survivors, key=lambda c: (c.diagnostics["weak_jsd"], c.mutation.sort_key))


def find_corruption(strong, weak, puzzle, settings: FilterSettings = FilterSettings()):
    """generate -> filter -> select; returns (choice or None, number of candidates, survivors)."""
    cands = generate_candidates(puzzle.board)
    survivors = filter_candidates(strong, weak, puzzle, cands, settings)
    if not survivors:
        return None, len(cands), survivors
    return select_corruption(weak, puzzle.board, survivors), len(cands), survivors
