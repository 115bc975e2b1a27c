"""Desk-scale fixtures: puzzles that exercise the planted synthetic model.

Every fixture puzzle (in the solver's frame) has the solver's rook on the
plant's first-source square, an opponent pawn on the carrier square and the
solver's only knight a knight's jump from the carrier. The PV is

1. rook first_source -> readout (the planted top move),
2. an opponent reply that keeps the carrier pawn in place,
3. knight takes on the carrier,
4. any opponent reply.

Half the puzzles are colour-flipped so the solver plays black.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .chess.board import Board, FenError
from .chess.masks import KNIGHT_TARGETS, ROOK_RAYS
from .chess.squares import Move, square_name
from .corruptions import CorruptionCandidate, Mutation
from .model.synthetic import PlantDescriptor
from .puzzles import PuzzleRecord

_EXTRA_PLAYER = "PPBB"
_EXTRA_OPPONENT = "ppbrn"


def _path_clear(board: Board, a: int, b: int) -> bool:
    for ray in ROOK_RAYS[a]:
        if b in ray:
            return all(board.pieces[s] is None for s in ray[:ray.index(b)])
    return False


def _try_position(rng, plant: PlantDescriptor, sparse: bool):
    s3 = int(rng.choice(KNIGHT_TARGETS[plant.carrier]))
    place = {plant.first_source: "R", plant.carrier: "p", s3: "N"}
    free = [sq for sq in range(64) if sq not in place and sq != plant.readout]

    def put(sym, squares):
        sq = int(rng.choice([s for s in squares if s not in place]))
        place[sq] = sym

    put("K", free)
    put("k", [s for s in free if s >= 40] if sparse else free)
    pawnable = [s for s in free if 8 <= s < 56]
    if sparse:
        below = plant.carrier - 8  # block the carrier pawn so the king must move
        if below in place:
            return None
        place[below] = "P"
        extras_p, extras_o = rng.integers(0, 3), 0
    else:
        extras_p, extras_o = rng.integers(0, 4), rng.integers(1, 5)
    for _ in range(extras_p):
        sym = _EXTRA_PLAYER[rng.integers(len(_EXTRA_PLAYER))]
        put(sym, pawnable if sym == "P" else free)
    for _ in range(extras_o):
        sym = _EXTRA_OPPONENT[rng.integers(len(_EXTRA_OPPONENT))]
        put(sym, pawnable if sym == "p" else free)
    try:
        return Board.from_pieces(place, "w"), s3
    except FenError:
        return None


def _build(rng, plant: PlantDescriptor, sparse: bool):
    got = _try_position(rng, plant, sparse)
    if got is None:
        return None
    board, s3 = got
    m1 = Move(plant.first_source, plant.readout)
    moves = board.legal_moves()
    if m1 not in moves or len(moves) <= 10:
        return None
    if sum(m.target == plant.readout for m in moves) != 1 or not _path_clear(board, m1.source, m1.target):
        return None
    b1 = board.apply_move(m1)
    m3 = Move(s3, plant.carrier)
    replies = [r for r in b1.legal_moves() if m3 in b1.apply_move(r).legal_moves()]
    if not replies:
        return None
    m2 = replies[int(rng.integers(len(replies)))]
    b3 = b1.apply_move(m2)
    if len(b3.legal_moves()) <= 10:
        return None
    b4 = b3.apply_move(m3)
    last = b4.legal_moves()
    if not last:
        return None
    m4 = last[int(rng.integers(len(last)))]
    forced = len(b1.legal_moves()) == 1
    return board, (m1, m2, m3, m4), forced


def planted_puzzles(n: int, seed: int = 0, plant: PlantDescriptor | None = None,
                    sparse_fraction: float = 0.5, flip_fraction: float = 0.5,
                    max_tries: int = 200000) -> list[PuzzleRecord]:
    """n fixture puzzles for the planted model, deterministic per seed.

    "Sparse" puzzles leave the opponent only a king and the blocked carrier
    pawn, which usually makes the reply forced.
    """
    plant = plant or PlantDescriptor()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_tries):
        if len(out) == n:
            break
        sparse = rng.random() < sparse_fraction
        got = _build(rng, plant, sparse)
        if got is None:
            continue
        board, pv, forced = got
        if rng.random() < flip_fraction:
            board, pv = board.mirror(), tuple(m.mirror() for m in pv)
        pid = f"fx{len(out):05d}"
        out.append(PuzzleRecord(pid, board.fen(), pv, rating=1500, meta={"forced_reply": forced}))
    if len(out) < n:
        raise RuntimeError(f"only {len(out)} of {n} fixture puzzles found")
    return out


def planted_corruption(rec: PuzzleRecord, plant: PlantDescriptor | None = None) -> CorruptionCandidate:
    """Remove the carrier pawn (the corruption the plant is built around)."""
    plant = plant or PlantDescriptor()
    sq = plant.carrier if rec.board.white_to_move else plant.carrier ^ 56
    mut = Mutation("remove_pawn", sq)
    return CorruptionCandidate(mut.apply(rec.board), mut)


def _predecessor(board: Board, rng, tries: int = 200):
    """A position and opponent move leading to `board` (for Lichess-style rows)."""
    white = board.white_to_move
    mover = [sq for sq, x in enumerate(board.pieces)
             if x is not None and x.isupper() != white and x.lower() in "nbrqk"]
    empty = [sq for sq in range(64) if board.pieces[sq] is None]
    for _ in range(tries):
        if not mover:
            return None
        a = int(rng.choice(mover))
        b = int(rng.choice(empty))
        pieces = list(board.pieces)
        pieces[b], pieces[a] = pieces[a], None
        prev = Board(tuple(pieces), "b" if white else "w", board.castling, None)
        if prev.illegality() is not None:
            continue
        m = Move(b, a)
        if prev.is_legal(m) and prev.apply_move(m).pieces == board.pieces:
            return prev, m
    return None


def write_lichess_csv(path, records, seed: int = 0) -> int:
    """Write records as Lichess rows (FEN before a setup move); returns rows written."""
    rng = np.random.default_rng(seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["PuzzleId", "FEN", "Moves", "Rating", "RatingDeviation", "Popularity", "NbPlays",
                    "Themes", "GameUrl", "OpeningTags"])
        for rec in records:
            got = _predecessor(rec.board, rng)
            if got is None:
                continue
            prev, setup = got
            moves = " ".join([setup.uci()] + [m.uci() for m in rec.pv])
            w.writerow([rec.id, prev.fen(), moves, rec.rating, 80, 90, 100, "fixture", "", ""])
            n += 1
    return n


def describe(rec: PuzzleRecord) -> str:
    sq = rec.squares
    return " ".join(f"{k}={square_name(v)}" for k, v in sq.items())
