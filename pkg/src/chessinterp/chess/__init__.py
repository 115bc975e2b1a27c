from .board import (
    START_FEN,
    Board,
    FenError,
    IllegalMoveError,
    apply_move,
    legal_moves,
    orient_to_player,
    parse_fen,
    perft,
    play,
)
from .encoding import COMPACT_LAYOUT, InputPlanes, LayoutDescriptor, LayoutError, encode_input
from .masks import kind_matrix, positional_encoding, reachability_mask
from .squares import Move, mirror_square, parse_square, square, square_name

__all__ = [
    "START_FEN", "Board", "FenError", "IllegalMoveError", "apply_move", "legal_moves",
    "orient_to_player", "parse_fen", "perft", "play", "COMPACT_LAYOUT", "InputPlanes",
    "LayoutDescriptor", "LayoutError", "encode_input", "kind_matrix", "positional_encoding",
    "reachability_mask", "Move", "mirror_square", "parse_square", "square", "square_name",
]
