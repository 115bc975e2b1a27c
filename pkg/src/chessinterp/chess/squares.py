"""Square indexing and move values.

Squares are plain ints 0..63, rank-major (a1=0, b1=1, ..., h8=63).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

FILE_NAMES = "abcdefgh"
RANK_NAMES = "12345678"

SQUARE_NAMES = [f + r for r in RANK_NAMES for f in FILE_NAMES]

PIECE_KINDS = ("pawn", "knight", "bishop", "rook", "queen", "king")
KIND_SYMBOLS = {"pawn": "p", "knight": "n", "bishop": "b", "rook": "r", "queen": "q", "king": "k"}
SYMBOL_KINDS = {v: k for k, v in KIND_SYMBOLS.items()}


def square(file: int, rank: int) -> int:
    return rank * 8 + file


def square_file(sq: int) -> int:
    return sq & 7


def square_rank(sq: int) -> int:
    return sq >> 3


def square_name(sq: int) -> str:
    return SQUARE_NAMES[sq]


def parse_square(name: str) -> int:
    if len(name) != 2 or name[0] not in FILE_NAMES or name[1] not in RANK_NAMES:
        raise ValueError(f"invalid square name {name!r}")
    return square(FILE_NAMES.index(name[0]), RANK_NAMES.index(name[1]))


def mirror_square(sq: int) -> int:
    """Flip the rank (a1 <-> a8); the map used to put the side to move at the bottom."""
    return sq ^ 56


@dataclass(frozen=True, order=True)
class Move:
    source: int
    target: int
    promotion: Optional[str] = None  # one of "q", "r", "b", "n"

    def __post_init__(self):
        if not (0 <= self.source < 64 and 0 <= self.target < 64):
            raise ValueError(f"square out of range in move {self.source}->{self.target}")
        if self.source == self.target:
            raise ValueError("source and target must differ")
        if self.promotion is not None and self.promotion not in "qrbn":
            raise ValueError(f"invalid promotion piece {self.promotion!r}")

    @classmethod
    def from_uci(cls, text: str) -> "Move":
        text = text.strip()
        if len(text) not in (4, 5):
            raise ValueError(f"invalid UCI move {text!r}")
        promo = text[4] if len(text) == 5 else None
        return cls(parse_square(text[:2]), parse_square(text[2:4]), promo)

    def uci(self) -> str:
        return square_name(self.source) + square_name(self.target) + (self.promotion or "")

    def mirror(self) -> "Move":
        return Move(mirror_square(self.source), mirror_square(self.target), self.promotion)

    def __str__(self) -> str:
        return self.uci()
