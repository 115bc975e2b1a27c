import random

import chess as pychess
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chessinterp.chess import (
    COMPACT_LAYOUT,
    START_FEN,
    Board,
    FenError,
    IllegalMoveError,
    LayoutDescriptor,
    LayoutError,
    Move,
    encode_input,
    orient_to_player,
    parse_fen,
    parse_square,
    perft,
    positional_encoding,
    reachability_mask,
    square_name,
)
from chessinterp.chess.masks import kind_matrix

KIWIPETE = "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1"
POSITION_3 = "8/2p5/3p4/KP5r/1R3p1k/8/4P1P1/8 w - - 0 1"
POSITION_4 = "r3k2r/Pppp1ppp/1b3nbN/nP6/BBP1P3/q4N2/Pp1P2PP/R2Q1RK1 w kq - 0 1"


def oracle_moves(fen):
    return sorted(m.uci() for m in pychess.Board(fen).legal_moves)


def ours(board):
    return sorted(m.uci() for m in board.legal_moves())


def test_parse_start():
    b = parse_fen(START_FEN)
    assert b.turn == "w" and b.castling == "KQkq" and b.ep is None
    assert b.piece_at(parse_square("e1")) == "K"
    assert b.fen() == START_FEN


def test_parse_black_to_move():
    b = parse_fen(START_FEN.replace(" w ", " b "))
    assert b.turn == "b"
    assert b.pieces == parse_fen(START_FEN).pieces


@pytest.mark.parametrize(
    "fen,field",
    [
        ("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR/8 w KQkq - 0 1", "placement"),
        ("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP w KQkq - 0 1", "placement"),
        ("rnbqkbnr/ppppxppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1", "placement"),
        ("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKKNR w KQkq - 0 1", "placement"),
        ("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR x KQkq - 0 1", "side"),
        ("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq", "record"),
        ("Pnbqkbnr/pppppppp/8/8/8/8/1PPPPPPP/RNBQKBNR w KQkq - 0 1", "placement"),
    ],
)
def test_parse_errors(fen, field):
    with pytest.raises(FenError) as err:
        parse_fen(fen)
    assert err.value.field == field


def test_nine_ranks_names_rank_count():
    with pytest.raises(FenError, match="expected 8 ranks, got 9"):
        parse_fen("8/8/8/8/8/8/8/8/8 w - - 0 1")


def test_side_not_to_move_in_check_rejected():
    with pytest.raises(FenError, match="not to move is in check"):
        parse_fen("4k3/8/8/8/8/8/4R3/4K3 w - - 0 1")


def test_start_has_20_moves():
    assert len(Board.start().legal_moves()) == 20


def test_bare_kings():
    b = parse_fen("4k3/8/8/8/8/8/8/4K3 w - - 0 1")
    assert ours(b) == oracle_moves(b.fen())
    assert len(b.legal_moves()) == 5


def test_checkmate_has_no_moves():
    b = parse_fen("rnb1kbnr/pppp1ppp/8/4p3/6Pq/5P2/PPPPP2P/RNBQKBNR w KQkq - 1 3")
    assert b.legal_moves() == []
    assert b.is_checkmate()


@pytest.mark.parametrize("depth,count", [(0, 1), (1, 20), (2, 400), (3, 8902)])
def test_perft_start(depth, count):
    assert perft(Board.start(), depth) == count


@pytest.mark.parametrize(
    "fen,counts",
    [
        (KIWIPETE, [48, 2039]),
        (POSITION_3, [14, 191, 2812]),
        (POSITION_4, [6, 264, 9467]),
    ],
)
def test_perft_reference_positions(fen, counts):
    b = parse_fen(fen)
    assert [perft(b, d + 1) for d in range(len(counts))] == counts


def _oracle_perft(board, depth):
    if depth == 0:
        return 1
    total = 0
    for m in list(board.legal_moves):
        board.push(m)
        total += _oracle_perft(board, depth - 1)
        board.pop()
    return total


def test_perft_matches_oracle_on_kiwipete_depth3():
    assert perft(parse_fen(KIWIPETE), 3) == _oracle_perft(pychess.Board(KIWIPETE), 3)


def test_random_walks_match_oracle():
    rng = random.Random(7)
    for game in range(40):
        b = Board.start()
        ref = pychess.Board()
        for ply in range(80):
            assert ours(b) == sorted(m.uci() for m in ref.legal_moves), (game, ply, b.fen())
            moves = b.legal_moves()
            if not moves:
                break
            m = rng.choice(moves)
            b = b.apply_move(m)
            ref.push_uci(m.uci())
            assert b.is_check() == ref.is_check()


def test_apply_e2e4():
    b = Board.start().apply_move(Move.from_uci("e2e4"))
    assert b.piece_at(parse_square("e4")) == "P" and b.piece_at(parse_square("e2")) is None
    assert b.turn == "b" and b.ep == parse_square("e3")


def test_castling_moves_rook():
    b = parse_fen("r3k2r/8/8/8/8/8/8/R3K2R w KQkq - 0 1").apply_move(Move.from_uci("e1g1"))
    assert b.piece_at(parse_square("g1")) == "K" and b.piece_at(parse_square("f1")) == "R"
    assert b.piece_at(parse_square("h1")) is None and b.castling == "kq"
    b2 = b.apply_move(Move.from_uci("e8c8"))
    assert b2.piece_at(parse_square("d8")) == "r" and b2.castling == ""


def test_apply_illegal_names_move():
    with pytest.raises(IllegalMoveError, match="e2e5"):
        Board.start().apply_move(Move.from_uci("e2e5"))


def test_en_passant_and_promotion_against_oracle():
    for fen in ["4k3/8/8/3pP3/8/8/8/4K3 w - d6 0 1", "4k3/1P6/8/8/8/8/8/4K3 w - - 0 1",
                "8/8/8/KPp4r/8/8/8/7k w - c6 0 1"]:
        assert ours(parse_fen(fen)) == oracle_moves(fen)


def test_uci_round_trip():
    for text in ["e2e4", "e7e8q", "a1h8"]:
        assert Move.from_uci(text).uci() == text
    assert square_name(parse_square("g6")) == "g6"


# -- orientation -------------------------------------------------------------


def test_orient_white_is_identity_on_placement():
    b = Board.start()
    assert orient_to_player(b).pieces == b.pieces


def test_orient_black_puts_king_on_e1():
    b = parse_fen("4k3/8/8/8/8/8/8/K7 b - - 0 1")
    o = orient_to_player(b)
    assert o.piece_at(parse_square("e1")) == "K" and o.turn == "w" and o.mirrored
    assert o.piece_at(parse_square("a8")) == "k"


def test_orient_idempotent():
    b = parse_fen("4k3/8/8/8/8/8/8/K7 b - - 0 1")
    assert orient_to_player(orient_to_player(b)).pieces == orient_to_player(b).pieces


def test_mirror_is_involution_and_moves_correspond():
    rng = random.Random(3)
    b = Board.start()
    for _ in range(30):
        assert b.mirror().mirror() == b
        o = orient_to_player(b)
        assert o.to_absolute() == b
        expected = sorted(m.mirror().uci() if o.mirrored else m.uci() for m in b.legal_moves())
        assert sorted(m.uci() for m in o.legal_moves()) == expected
        b = b.apply_move(rng.choice(b.legal_moves()))


# -- masks ---------------------------------------------------------------------


def names(mask):
    return {square_name(i) for i in range(64) if mask >> i & 1}


def test_knight_a1():
    assert names(reachability_mask(parse_square("a1"), "knight")) == {"b3", "c2"}


def test_rook_d4():
    m = names(reachability_mask(parse_square("d4"), "rook"))
    assert len(m) == 14 and all(s[0] == "d" or s[1] == "4" for s in m)


def test_positional_is_union_over_kinds():
    kinds = ["pawn", "knight", "bishop", "rook", "queen", "king"]
    pos = positional_encoding()
    for sq in range(64):
        union = 0
        for k in kinds:
            union |= reachability_mask(sq, k)
        assert [int(pos[sq, r]) for r in range(64)] == [union >> r & 1 for r in range(64)]


@pytest.mark.parametrize("kind", ["knight", "bishop", "rook", "queen", "king"])
def test_masks_symmetric(kind):
    m = kind_matrix(kind)
    assert np.array_equal(m, m.T)


# -- encoding ------------------------------------------------------------------


def test_start_pawn_plane():
    inp = encode_input(orient_to_player(Board.start()), LayoutDescriptor())
    pawn = inp.planes[0]
    assert pawn.sum() == 8 and all(pawn[parse_square(f + "2")] == 1 for f in "abcdefgh")


def test_castling_channel_constant():
    layout = LayoutDescriptor()
    inp = encode_input(orient_to_player(Board.start()), layout)
    idx = layout.n_planes - len(layout.aux) + layout.aux.index("castle_us_oo")
    assert np.all(inp.planes[idx] == 1.0)


def test_history_policies():
    b = orient_to_player(Board.start())
    zeros = encode_input(b, LayoutDescriptor())
    assert zeros.planes[13:13 * 8].sum() == 0
    rep = encode_input(b, LayoutDescriptor(history_policy="repeat"))
    assert np.array_equal(rep.planes[13:26], rep.planes[:13])


def test_width_mismatch_raises():
    with pytest.raises(LayoutError):
        encode_input(orient_to_player(Board.start()), COMPACT_LAYOUT, expected_width=999)


def test_requires_player_frame():
    with pytest.raises(LayoutError):
        encode_input(Board.start(), COMPACT_LAYOUT)


def test_layout_round_trip():
    lay = LayoutDescriptor(history_slots=2, history_policy="repeat")
    assert LayoutDescriptor.from_dict(lay.to_dict()) == lay


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_piece_planes_partition(seed):
    rng = random.Random(seed)
    b = Board.start()
    for _ in range(rng.randrange(40)):
        moves = b.legal_moves()
        if not moves:
            break
        b = b.apply_move(rng.choice(moves))
    o = orient_to_player(b)
    inp = encode_input(o, COMPACT_LAYOUT)
    pieces = inp.planes[:12]
    assert set(np.unique(pieces)) <= {0.0, 1.0}
    assert pieces.sum(axis=0).max() <= 1
    assert pieces.sum() == o.piece_count()
