"""Policy/value outputs and the legal-move distribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..chess.board import Board
from ..chess.squares import Move

# column order of the promotion offset block
PROMOTION_PIECES = ("q", "r", "b", "n")


class TerminalPositionError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyOutput:
    logits: np.ndarray  # (64, 64) source x target, player frame
    promotion_offsets: Optional[np.ndarray] = None  # (8 target files, 4 pieces) or None (queen only)

    def move_logit(self, move: Move) -> float:
        """Logit of a move; -inf for under-promotions when the model has no promotion block.

        With offsets, knight promotions use the base source/target logit and the
        other pieces add their own offset plus the knight offset.
        """
        base = float(self.logits[move.source, move.target])
        if move.promotion is None:
            return base
        if self.promotion_offsets is None:
            return base if move.promotion == "q" else float("-inf")
        off = self.promotion_offsets[move.target & 7]
        if move.promotion == "n":
            return base
        return base + float(off[PROMOTION_PIECES.index(move.promotion)]) + float(off[3])


@dataclass(frozen=True)
class ValueOutput:
    wdl: np.ndarray  # (3,) win, draw, loss probabilities for the side to move


@dataclass(frozen=True)
class MoveDist:
    moves: tuple
    probs: np.ndarray  # float64, aligned with moves

    def prob(self, move: Move) -> float:
        try:
            return float(self.probs[self.moves.index(move)])
        except ValueError:
            return 0.0

    def as_dict(self) -> dict:
        return {m.uci(): float(p) for m, p in zip(self.moves, self.probs)}

    def top(self) -> Move:
        """Highest-probability move; ties go to the first move in generation order."""
        return self.moves[int(np.argmax(self.probs))]


def policy_distribution(policy: PolicyOutput, board: Board) -> MoveDist:
    """Softmax over legal moves only; `board` must be in the frame the model saw."""
    moves = board.legal_moves()
    if not moves:
        raise TerminalPositionError(f"no legal moves in {board.fen()}")
    logits = np.array([policy.move_logit(m) for m in moves], dtype=np.float64)
    keep = np.isfinite(logits)
    moves = [m for m, k in zip(moves, keep) if k]
    logits = logits[keep]
    z = np.exp(logits - logits.max())
    return MoveDist(tuple(moves), z / z.sum())


def value_score(value) -> float:
    """Win minus loss probability, in [-1, 1]. Accepts a ValueOutput or a raw WDL triple."""
    wdl = value.wdl if isinstance(value, ValueOutput) else value
    return float(wdl[0]) - float(wdl[2])
