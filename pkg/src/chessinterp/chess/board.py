"""Immutable chess positions, FEN parsing, legal move generation and perft.

A Board is a 64-entry mailbox of piece symbols ("P" white pawn, "n" black knight,
None empty). In the player-relative orientation the side to move is always white
and occupies the low ranks; uppercase then means "player" and lowercase "opponent".
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

from .masks import BISHOP_RAYS, KING_TARGETS, KNIGHT_TARGETS, ROOK_RAYS
from .squares import (
    SYMBOL_KINDS,
    Move,
    mirror_square,
    parse_square,
    square_name,
    square_rank,
)

START_FEN = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1"

_PIECE_CHARS = set("PNBRQKpnbrqk")
_PROMOTIONS = ("q", "r", "b", "n")

# castling: right -> (king from, king to, rook from, rook to, must be empty, must not be attacked)
_CASTLES = {
    "K": (4, 6, 7, 5, (5, 6), (4, 5, 6)),
    "Q": (4, 2, 0, 3, (1, 2, 3), (4, 3, 2)),
    "k": (60, 62, 63, 61, (61, 62), (60, 61, 62)),
    "q": (60, 58, 56, 59, (57, 58, 59), (60, 59, 58)),
}
# squares whose vacating/capture revokes a right
_RIGHT_SQUARES = {4: "KQ", 7: "K", 0: "Q", 60: "kq", 63: "k", 56: "q"}


class FenError(ValueError):
    """Malformed or impossible FEN; `field` names the offending FEN field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"FEN {field}: {message}")
        self.field = field


class IllegalMoveError(ValueError):
    pass


def _attacked(pieces, sq: int, by_white: bool) -> bool:
    if by_white:
        n, k, p, r, b, q = "N", "K", "P", "R", "B", "Q"
    else:
        n, k, p, r, b, q = "n", "k", "p", "r", "b", "q"
    for t in KNIGHT_TARGETS[sq]:
        if pieces[t] == n:
            return True
    for t in KING_TARGETS[sq]:
        if pieces[t] == k:
            return True
    f, rank = sq & 7, sq >> 3
    pr = rank - 1 if by_white else rank + 1
    if 0 <= pr < 8:
        if f > 0 and pieces[pr * 8 + f - 1] == p:
            return True
        if f < 7 and pieces[pr * 8 + f + 1] == p:
            return True
    for ray in ROOK_RAYS[sq]:
        for t in ray:
            x = pieces[t]
            if x is not None:
                if x == r or x == q:
                    return True
                break
    for ray in BISHOP_RAYS[sq]:
        for t in ray:
            x = pieces[t]
            if x is not None:
                if x == b or x == q:
                    return True
                break
    return False


def _king_square(pieces, white: bool) -> int:
    k = "K" if white else "k"
    for i, x in enumerate(pieces):
        if x == k:
            return i
    return -1


def _pseudo_moves(pieces, white: bool, castling: str, ep: Optional[int]) -> list[Move]:
    moves = []
    own = str.isupper if white else str.islower
    for sq, x in enumerate(pieces):
        if x is None or not own(x):
            continue
        kind = x.lower()
        if kind == "p":
            f, r = sq & 7, sq >> 3
            step = 8 if white else -8
            last = 7 if white else 0
            start = 1 if white else 6
            one = sq + step
            targets = []
            if pieces[one] is None:
                targets.append(one)
                if r == start and pieces[one + step] is None:
                    targets.append(one + step)
            for df in (-1, 1):
                if 0 <= f + df < 8:
                    t = one + df
                    y = pieces[t]
                    if (y is not None and own(y) is False) or t == ep:
                        targets.append(t)
            for t in targets:
                if t >> 3 == last:
                    moves.extend(Move(sq, t, pr) for pr in _PROMOTIONS)
                else:
                    moves.append(Move(sq, t))
        elif kind == "n" or kind == "k":
            table = KNIGHT_TARGETS if kind == "n" else KING_TARGETS
            for t in table[sq]:
                y = pieces[t]
                if y is None or not own(y):
                    moves.append(Move(sq, t))
        else:
            rays = ()
            if kind in "rq":
                rays += ROOK_RAYS[sq]
            if kind in "bq":
                rays += BISHOP_RAYS[sq]
            for ray in rays:
                for t in ray:
                    y = pieces[t]
                    if y is None:
                        moves.append(Move(sq, t))
                    else:
                        if not own(y):
                            moves.append(Move(sq, t))
                        break
    for right in castling:
        if right.isupper() != white:
            continue
        kf, kt, rf, rt, empty, safe = _CASTLES[right]
        k, rk = ("K", "R") if white else ("k", "r")
        if pieces[kf] != k or pieces[rf] != rk:
            continue
        if any(pieces[s] is not None for s in empty):
            continue
        if any(_attacked(pieces, s, not white) for s in safe):
            continue
        moves.append(Move(kf, kt))
    return moves


def _make(pieces, move: Move, white: bool, ep: Optional[int]) -> list:
    out = list(pieces)
    x = out[move.source]
    out[move.source] = None
    if x in "Pp" and move.target == ep:
        out[move.target - 8 if white else move.target + 8] = None
    if move.promotion:
        x = move.promotion.upper() if white else move.promotion
    if x in "Kk" and abs(move.target - move.source) == 2:
        # castling: relocate the rook
        rf, rt = (move.source + 3, move.source + 1) if move.target > move.source else (move.source - 4, move.source - 1)
        out[rt] = out[rf]
        out[rf] = None
    out[move.target] = x
    return out


def _legal(pieces, white: bool, castling: str, ep: Optional[int]) -> list[Move]:
    legal = []
    for m in _pseudo_moves(pieces, white, castling, ep):
        after = _make(pieces, m, white, ep)
        ksq = m.target if after[m.target] in ("K" if white else "k",) else _king_square(after, white)
        if not _attacked(after, ksq, not white):
            legal.append(m)
    return legal


@dataclass(frozen=True)
class Board:
    pieces: tuple  # 64 entries of piece symbol or None
    turn: str = "w"
    castling: str = ""  # subset of "KQkq", canonical order
    ep: Optional[int] = None
    halfmove: int = 0
    fullmove: int = 1
    orientation: str = "absolute"  # or "player"
    mirrored: bool = False  # player frame obtained by flipping a black-to-move board

    # -- construction -----------------------------------------------------

    @classmethod
    def from_fen(cls, text: str) -> "Board":
        return parse_fen(text)

    @classmethod
    def start(cls) -> "Board":
        return parse_fen(START_FEN)

    @classmethod
    def from_pieces(cls, placement: dict, turn: str = "w", castling: str = "", ep=None) -> "Board":
        """Build from {square name or index: symbol}; validated like a parsed FEN."""
        pieces = [None] * 64
        for sq, sym in placement.items():
            pieces[parse_square(sq) if isinstance(sq, str) else sq] = sym
        b = cls(tuple(pieces), turn, _canon_castling(castling), ep)
        reason = b.illegality()
        if reason:
            raise FenError("placement", reason)
        return b

    # -- queries ----------------------------------------------------------

    @property
    def white_to_move(self) -> bool:
        return self.turn == "w"

    def piece_at(self, sq: int) -> Optional[str]:
        return self.pieces[sq]

    def occupancy(self) -> dict:
        """Bitmask per piece symbol ("P" ... "k"); the 12 disjoint occupancy sets."""
        occ = {c: 0 for c in "PNBRQKpnbrqk"}
        for sq, x in enumerate(self.pieces):
            if x is not None:
                occ[x] |= 1 << sq
        return occ

    def piece_count(self) -> int:
        return sum(x is not None for x in self.pieces)

    def king_square(self, white: bool) -> int:
        return _king_square(self.pieces, white)

    def is_attacked(self, sq: int, by_white: bool) -> bool:
        return _attacked(self.pieces, sq, by_white)

    def is_check(self) -> bool:
        k = self.king_square(self.white_to_move)
        return k >= 0 and _attacked(self.pieces, k, not self.white_to_move)

    def illegality(self) -> Optional[str]:
        """Reason this position is not a legal chess state, or None."""
        counts = {c: 0 for c in "Kk"}
        for sq, x in enumerate(self.pieces):
            if x is None:
                continue
            if x not in _PIECE_CHARS:
                return f"invalid piece {x!r}"
            if x in counts:
                counts[x] += 1
            if x in "Pp" and square_rank(sq) in (0, 7):
                return f"pawn on back rank at {square_name(sq)}"
        if counts["K"] != 1:
            return f"expected one white king, found {counts['K']}"
        if counts["k"] != 1:
            return f"expected one black king, found {counts['k']}"
        other = not self.white_to_move
        if _attacked(self.pieces, _king_square(self.pieces, other), self.white_to_move):
            return "side not to move is in check"
        return None

    def is_legal_position(self) -> bool:
        return self.illegality() is None

    def legal_moves(self) -> list[Move]:
        return _legal(self.pieces, self.white_to_move, self.castling, self.ep)

    def is_legal(self, move: Move) -> bool:
        return move in self.legal_moves()

    def is_checkmate(self) -> bool:
        return self.is_check() and not self.legal_moves()

    def kind_at(self, sq: int) -> Optional[str]:
        x = self.pieces[sq]
        return None if x is None else SYMBOL_KINDS[x.lower()]

    # -- transformation ---------------------------------------------------

    def apply_move(self, move: Move) -> "Board":
        if move not in self.legal_moves():
            raise IllegalMoveError(f"illegal move {move.uci()} in {self.fen()}")
        return self._push(move)

    def _push(self, move: Move) -> "Board":
        white = self.white_to_move
        x = self.pieces[move.source]
        captured = self.pieces[move.target] is not None or (x in "Pp" and move.target == self.ep)
        after = _make(self.pieces, move, white, self.ep)
        castling = self.castling
        for sq in (move.source, move.target):
            for right in _RIGHT_SQUARES.get(sq, ""):
                castling = castling.replace(right, "")
        ep = None
        if x in "Pp" and abs(move.target - move.source) == 16:
            ep = (move.source + move.target) // 2
        return Board(
            tuple(after),
            "b" if white else "w",
            castling,
            ep,
            0 if (x in "Pp" or captured) else self.halfmove + 1,
            self.fullmove + (0 if white else 1),
            self.orientation,
            self.mirrored,
        )

    def mirror(self) -> "Board":
        """Flip ranks and swap colors, side to move and castling rights (an involution)."""
        pieces = [None] * 64
        for sq, x in enumerate(self.pieces):
            if x is not None:
                pieces[mirror_square(sq)] = x.swapcase()
        castling = _canon_castling(self.castling.swapcase())
        ep = None if self.ep is None else mirror_square(self.ep)
        return replace(self, pieces=tuple(pieces), turn="b" if self.white_to_move else "w",
                       castling=castling, ep=ep)

    def orient_to_player(self) -> "Board":
        return orient_to_player(self)

    def to_absolute(self) -> "Board":
        if self.orientation == "absolute":
            return self
        b = self.mirror() if self.mirrored else self
        return replace(b, orientation="absolute", mirrored=False)

    def fen(self) -> str:
        rows = []
        for r in range(7, -1, -1):
            row, empty = "", 0
            for f in range(8):
                x = self.pieces[r * 8 + f]
                if x is None:
                    empty += 1
                else:
                    if empty:
                        row += str(empty)
                        empty = 0
                    row += x
            if empty:
                row += str(empty)
            rows.append(row)
        ep = "-" if self.ep is None else square_name(self.ep)
        return f"{'/'.join(rows)} {self.turn} {self.castling or '-'} {ep} {self.halfmove} {self.fullmove}"

    def __str__(self) -> str:
        lines = []
        for r in range(7, -1, -1):
            lines.append(" ".join(self.pieces[r * 8 + f] or "." for f in range(8)))
        return "\n".join(lines)


def _canon_castling(text: str) -> str:
    return "".join(c for c in "KQkq" if c in text)


def parse_fen(text: str) -> Board:
    fields = text.split()
    if len(fields) == 4:
        fields += ["0", "1"]
    if len(fields) != 6:
        raise FenError("record", f"expected 6 fields, got {len(fields)}")
    placement, turn, castling, ep, half, full = fields
    ranks = placement.split("/")
    if len(ranks) != 8:
        raise FenError("placement", f"expected 8 ranks, got {len(ranks)}")
    pieces = [None] * 64
    for i, row in enumerate(ranks):
        r = 7 - i
        f = 0
        for c in row:
            if c.isdigit():
                f += int(c)
            elif c in _PIECE_CHARS:
                if f >= 8:
                    raise FenError("placement", f"rank {r + 1} has more than 8 files")
                pieces[r * 8 + f] = c
                f += 1
            else:
                raise FenError("placement", f"invalid piece letter {c!r} in rank {r + 1}")
        if f != 8:
            raise FenError("placement", f"rank {r + 1} has {f} files")
    if turn not in ("w", "b"):
        raise FenError("side", f"invalid side to move {turn!r}")
    if castling != "-" and (not castling or any(c not in "KQkq" for c in castling)):
        raise FenError("castling", f"invalid castling field {castling!r}")
    ep_sq = None
    if ep != "-":
        try:
            ep_sq = parse_square(ep)
        except ValueError:
            raise FenError("en-passant", f"invalid square {ep!r}") from None
        if square_rank(ep_sq) not in (2, 5):
            raise FenError("en-passant", f"square {ep} not on rank 3 or 6")
    try:
        halfmove, fullmove = int(half), int(full)
    except ValueError:
        raise FenError("counters", f"non-integer move counters {half!r} {full!r}") from None
    board = Board(tuple(pieces), turn, _canon_castling(castling.replace("-", "")), ep_sq, halfmove, fullmove)
    reason = board.illegality()
    if reason:
        raise FenError("placement", reason)
    return board


def legal_moves(board: Board) -> list[Move]:
    return board.legal_moves()


def apply_move(board: Board, move: Move) -> Board:
    return board.apply_move(move)


def orient_to_player(board: Board) -> Board:
    """Player-relative view: side to move becomes white and sits on the low ranks."""
    if board.orientation == "player":
        return board
    if board.white_to_move:
        return replace(board, orientation="player", mirrored=False)
    return replace(board.mirror(), orientation="player", mirrored=True)


def perft(board: Board, depth: int) -> int:
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth == 0:
        return 1
    moves = board.legal_moves()
    if depth == 1:
        return len(moves)
    return sum(perft(board._push(m), depth - 1) for m in moves)


def play(board: Board, moves: Iterable) -> list[Board]:
    """Boards visited along a move sequence (UCI strings or Moves), starting with `board`."""
    states = [board]
    for m in moves:
        if isinstance(m, str):
            m = Move.from_uci(m)
        states.append(states[-1].apply_move(m))
    return states

