"""Empty-board move geometry: attack tables, reachability masks and the positional encoding."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .squares import PIECE_KINDS, square, square_file, square_rank

KNIGHT_DELTAS = ((1, 2), (2, 1), (-1, 2), (-2, 1), (1, -2), (2, -1), (-1, -2), (-2, -1))
KING_DELTAS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))
ROOK_DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))
BISHOP_DIRS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def _step_targets(deltas):
    table = []
    for sq in range(64):
        f, r = square_file(sq), square_rank(sq)
        table.append(tuple(square(f + df, r + dr) for df, dr in deltas
                           if 0 <= f + df < 8 and 0 <= r + dr < 8))
    return tuple(table)


def _rays(dirs):
    table = []
    for sq in range(64):
        f, r = square_file(sq), square_rank(sq)
        rays = []
        for df, dr in dirs:
            ray = []
            nf, nr = f + df, r + dr
            while 0 <= nf < 8 and 0 <= nr < 8:
                ray.append(square(nf, nr))
                nf, nr = nf + df, nr + dr
            if ray:
                rays.append(tuple(ray))
        table.append(tuple(rays))
    return tuple(table)


KNIGHT_TARGETS = _step_targets(KNIGHT_DELTAS)
KING_TARGETS = _step_targets(KING_DELTAS)
ROOK_RAYS = _rays(ROOK_DIRS)
BISHOP_RAYS = _rays(BISHOP_DIRS)
QUEEN_RAYS = tuple(r + b for r, b in zip(ROOK_RAYS, BISHOP_RAYS))


def _pawn_targets(sq: int) -> list[int]:
    # player frame: pawns advance towards rank 8
    f, r = square_file(sq), square_rank(sq)
    out = []
    if r < 7:
        out.append(square(f, r + 1))
        if f > 0:
            out.append(square(f - 1, r + 1))
        if f < 7:
            out.append(square(f + 1, r + 1))
    if r == 1:
        out.append(square(f, 3))
    return out


def _mask(squares) -> int:
    m = 0
    for s in squares:
        m |= 1 << s
    return m


@lru_cache(maxsize=None)
def reachability_mask(sq: int, kind: str) -> int:
    """Squares reachable from `sq` in one move by `kind` on an empty board, as a 64-bit int.

    Sliders ignore occlusion. Pawns move towards rank 8 (player frame) and include
    diagonal capture squares and the double push from rank 2.
    """
    if not 0 <= sq < 64:
        raise ValueError(f"square {sq} out of range")
    if kind == "knight":
        return _mask(KNIGHT_TARGETS[sq])
    if kind == "king":
        return _mask(KING_TARGETS[sq])
    if kind == "rook":
        return _mask(s for ray in ROOK_RAYS[sq] for s in ray)
    if kind == "bishop":
        return _mask(s for ray in BISHOP_RAYS[sq] for s in ray)
    if kind == "queen":
        return _mask(s for ray in QUEEN_RAYS[sq] for s in ray)
    if kind == "pawn":
        return _mask(_pawn_targets(sq))
    raise ValueError(f"unknown piece kind {kind!r}")


def mask_to_array(mask: int) -> np.ndarray:
    return np.array([(mask >> i) & 1 for i in range(64)], dtype=bool)


@lru_cache(maxsize=None)
def _kind_matrix(kind: str) -> np.ndarray:
    m = np.zeros((64, 64), dtype=bool)
    for sq in range(64):
        m[sq] = mask_to_array(reachability_mask(sq, kind))
    m.setflags(write=False)
    return m


def kind_matrix(kind: str) -> np.ndarray:
    """64x64 boolean matrix, row q = reachability_mask(q, kind)."""
    return _kind_matrix(kind)


@lru_cache(maxsize=None)
def _positional() -> np.ndarray:
    m = np.zeros((64, 64), dtype=bool)
    for kind in PIECE_KINDS:
        m |= _kind_matrix(kind)
    out = m.astype(np.float32)
    out.setflags(write=False)
    return out


def positional_encoding() -> np.ndarray:
    """Per-square 64-dim binary vector: bit r of row q set iff some piece kind moves q->r."""
    return _positional()
