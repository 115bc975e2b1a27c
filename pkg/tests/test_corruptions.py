import math

import chess as pychess
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chessinterp.chess import parse_fen
from chessinterp.corruptions import (
    CorruptionCandidate,
    FilterSettings,
    Mutation,
    NoCorruptionFound,
    evaluate_candidates,
    filter_candidates,
    filter_decision,
    find_corruption,
    generate_candidates,
    jensen_shannon,
    select_corruption,
)
from chessinterp.fixtures import planted_puzzles
from chessinterp.model.synthetic import build_synthetic_model, random_init_like

KIWIPETE = "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1"
MIDDLEGAME = "r1bq1rk1/pp2bppp/2n1pn2/3p4/2PP4/2N1PN2/PP1B1PPP/R2QKB1R w KQ - 0 8"


def oracle_candidates(fen):
    """Independent enumerator on python-chess: set of (mutation string, resulting placement)."""
    base = pychess.Board(fen)
    out = set()

    def accept(b, label):
        if len(b.pieces(pychess.KING, pychess.WHITE)) != 1 or len(b.pieces(pychess.KING, pychess.BLACK)) != 1:
            return
        if b.was_into_check():  # side not to move is attacked
            return
        if not any(True for _ in b.legal_moves):
            return
        out.add((label, b.board_fen()))

    for sq in pychess.SQUARES:
        if base.piece_at(sq) is None and 1 <= pychess.square_rank(sq) <= 6:
            for color, c in ((pychess.WHITE, "w"), (pychess.BLACK, "b")):
                b = base.copy()
                b.set_piece_at(sq, pychess.Piece(pychess.PAWN, color))
                b.ep_square = None
                accept(b, f"add_pawn({c},{pychess.square_name(sq)})")
        p = base.piece_at(sq)
        if p is not None and p.piece_type == pychess.PAWN:
            b = base.copy()
            b.remove_piece_at(sq)
            b.ep_square = None
            accept(b, f"remove_pawn({pychess.square_name(sq)})")
        if p is not None and p.piece_type != pychess.PAWN:
            for to in pychess.SQUARES:
                if base.piece_at(to) is None:
                    b = base.copy()
                    b.remove_piece_at(sq)
                    b.set_piece_at(to, p)
                    b.ep_square = None
                    accept(b, f"move_piece({pychess.square_name(sq)},{pychess.square_name(to)})")
    return out


@pytest.mark.parametrize("fen", [
    "4k3/8/8/8/8/8/8/4K3 w - - 0 1",
    "4k3/8/8/8/8/8/8/4K3 b - - 0 1",
    "4k3/8/3p4/8/8/8/8/R3K3 w Q - 0 1",
    KIWIPETE,
])
def test_candidates_match_brute_force(fen):
    ours = {(str(c.mutation), c.board.fen().split()[0]) for c in generate_candidates(parse_fen(fen))}
    assert ours == oracle_candidates(fen)


def test_kings_only_counts():
    cands = generate_candidates(parse_fen("4k3/8/8/8/8/8/8/4K3 w - - 0 1"))
    kinds = [c.mutation.kind for c in cands]
    assert "remove_pawn" not in kinds
    moved = [c for c in cands if c.mutation.kind == "move_piece"]
    # the e1 king may go to any of the 62 empty squares except the 5 next to the e8 king
    assert len([c for c in moved if c.mutation.origin == 4]) == 62 - 5
    assert len(cands) == len(oracle_candidates("4k3/8/8/8/8/8/8/4K3 w - - 0 1"))


def test_pawn_check_to_side_not_to_move_excluded():
    cands = {str(c.mutation) for c in generate_candidates(parse_fen("4k3/8/8/8/8/8/8/4K3 w - - 0 1"))}
    assert "add_pawn(w,d7)" not in cands  # checks black, who is not to move
    assert "add_pawn(b,d2)" in cands  # checks white, who is to move
    assert not any(m.startswith("add_pawn") and (m.endswith("1)") or m.endswith("8)")) for m in cands)


def test_middlegame_has_a_few_hundred():
    n = len(generate_candidates(parse_fen(MIDDLEGAME)))
    assert 100 <= n <= 1000


def test_castling_rights_revoked():
    b = parse_fen("r3k2r/8/8/8/8/8/8/R3K2R w KQkq - 0 1")
    moved = Mutation("move_piece", 16, origin=7).apply(b)  # h1 rook away
    assert moved.castling == "Qkq"
    king = Mutation("move_piece", 20, origin=4).apply(b)
    assert king.castling == "kq"


def test_mutation_round_trip():
    for m in (Mutation("add_pawn", 20, color="b"), Mutation("remove_pawn", 12), Mutation("move_piece", 3, origin=60)):
        assert Mutation.parse(str(m)) == m


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([KIWIPETE, MIDDLEGAME, "8/2p5/3p4/KP5r/1R3p1k/8/4P1P1/8 w - - 0 1"]), st.integers(0, 10**6))
def test_candidates_are_single_legal_mutations(fen, seed):
    clean = parse_fen(fen)
    cands = generate_candidates(clean)
    c = cands[np.random.default_rng(seed).integers(len(cands))]
    assert c.board.illegality() is None
    diff = {sq for sq in range(64) if c.board.pieces[sq] != clean.pieces[sq]}
    assert diff == set(c.mutation.squares())
    assert c.mutation.apply(clean) == c.board


# -- JSD ------------------------------------------------------------------------------


def test_jsd_examples():
    assert jensen_shannon({"a": 0.3, "b": 0.7}, {"a": 0.3, "b": 0.7}) == 0.0
    assert jensen_shannon({"a": 1.0}, {"b": 1.0}) == pytest.approx(math.log(2), abs=1e-15)
    assert jensen_shannon({"a": 0.5, "b": 0.5}, {"a": 1.0}) == pytest.approx(0.2157, abs=1e-4)


def hand_jsd(p, q):
    keys = set(p) | set(q)
    tot = {k: p.get(k, 0) + q.get(k, 0) for k in keys}
    kl = lambda x: sum(v * math.log(2 * v / tot[k]) for k, v in x.items() if v > 0)  # noqa: E731
    return (kl(p) + kl(q)) / 2


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_jsd_properties(a, b):
    if sum(a) <= 0 or sum(b) <= 0:
        return
    p = {f"m{i}": v / sum(a) for i, v in enumerate(a)}
    q = {f"m{i}": v / sum(b) for i, v in enumerate(b)}
    d = jensen_shannon(p, q)
    assert d == jensen_shannon(q, p)
    assert -1e-12 <= d <= math.log(2) + 1e-12
    assert d == pytest.approx(hand_jsd(p, q), abs=1e-9)


# -- filters ----------------------------------------------------------------------------


def diag(strong_prob=0.05, drop=0.0, gain=0.0):
    return {"strong_prob_corrupted": strong_prob, "weak_log_odds_clean": 0.0, "weak_log_odds_corrupted": -drop,
            "strong_value_clean": 0.0, "strong_value_corrupted": gain}


def test_filter_b_boundary():
    assert filter_decision(diag(drop=0.19))["pass_b"]
    assert not filter_decision(diag(drop=0.21))["pass_b"]
    assert filter_decision(diag(drop=-5.0))["pass_b"]  # increases always pass


def test_filter_a_and_c():
    assert not filter_decision(diag(strong_prob=0.5))["keep"]
    assert filter_decision(diag(strong_prob=0.099))["pass_a"]
    assert not filter_decision(diag(gain=0.11))["pass_c"]
    assert filter_decision(diag(gain=0.09))["pass_c"]


def reference_filter(d, use=(True, True, True)):
    checks = [
        d["strong_prob_corrupted"] < 0.10,
        not (d["weak_log_odds_clean"] - d["weak_log_odds_corrupted"] > 0.2),
        not (d["strong_value_corrupted"] - d["strong_value_clean"] > 0.1),
    ]
    return all(ok for ok, on in zip(checks, use) if on)


def random_diag(rng):
    return {"strong_prob_corrupted": float(rng.uniform(0, 0.3)),
            "weak_log_odds_clean": float(rng.normal(0, 2)), "weak_log_odds_corrupted": float(rng.normal(0, 2)),
            "strong_value_clean": float(rng.uniform(-1, 1)), "strong_value_corrupted": float(rng.uniform(-1, 1))}


def test_filter_matches_reference_on_random_candidates():
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = random_diag(rng)
        for use in [(a, b, c) for a in (True, False) for b in (True, False) for c in (True, False)]:
            s = FilterSettings(use_a=use[0], use_b=use[1], use_c=use[2])
            assert filter_decision(d, s)["keep"] == reference_filter(d, use)


def test_filters_monotone_in_toggles():
    rng = np.random.default_rng(8)
    diags = [random_diag(rng) for _ in range(300)]
    full = {i for i, d in enumerate(diags) if filter_decision(d)["keep"]}
    for s in (FilterSettings(use_a=False), FilterSettings(use_b=False), FilterSettings(use_c=False)):
        assert full <= {i for i, d in enumerate(diags) if filter_decision(d, s)["keep"]}


# -- selection on the planted model -------------------------------------------------------


@pytest.fixture(scope="module")
def models():
    strong = build_synthetic_model(seed=0)
    return strong, random_init_like(strong, 1)


def test_clean_candidate_fails_filter_a(models):
    strong, weak = models
    rec = planted_puzzles(1, seed=4)[0]
    cand = CorruptionCandidate(rec.board, Mutation("remove_pawn", 0))
    out = evaluate_candidates(strong, weak, rec.board, rec.best_move, [cand])[0]
    assert out.diagnostics["strong_prob_corrupted"] >= 0.5
    assert not filter_decision(out.diagnostics)["pass_a"]


def test_selection_is_brute_force_argmin(models):
    strong, weak = models
    for rec in planted_puzzles(3, seed=5):
        choice, n, survivors = find_corruption(strong, weak, rec)
        assert n == len(generate_candidates(rec.board))
        assert choice is not None and survivors
        ev_clean = weak.evaluate(rec.board)
        best = None
        for c in survivors:
            j = jensen_shannon(ev_clean.dist, weak.evaluate(c.board).dist)
            if best is None or (j, c.mutation.sort_key) < best[0]:
                best = ((j, c.mutation.sort_key), c)
        assert choice.mutation == best[1].mutation
        assert choice.diagnostics["keep"]
        assert choice.board.is_legal(rec.best_move) or choice.diagnostics["strong_prob_corrupted"] == 0.0


def test_select_tie_break_and_errors(models):
    _, weak = models
    b = parse_fen("4k3/8/8/8/8/8/8/4K3 w - - 0 1")
    a = CorruptionCandidate(b, Mutation("remove_pawn", 9), {"weak_jsd": 0.02})
    c = CorruptionCandidate(b, Mutation("remove_pawn", 8), {"weak_jsd": 0.01})
    d = CorruptionCandidate(b, Mutation("add_pawn", 30, color="w"), {"weak_jsd": 0.01})
    assert select_corruption(weak, b, [a]) is a
    assert select_corruption(weak, b, [a, c]) is c
    assert select_corruption(weak, b, [a, c, d]) is d  # add_pawn serializes before remove_pawn
    with pytest.raises(NoCorruptionFound):
        select_corruption(weak, b, [])


def test_filter_candidates_flags(models):
    strong, weak = models
    rec = planted_puzzles(1, seed=6)[0]
    cands = generate_candidates(rec.board)[:40]
    kept = filter_candidates(strong, weak, rec, cands)
    for c in kept:
        assert c.diagnostics["pass_a"] and c.diagnostics["pass_b"] and c.diagnostics["pass_c"]
