import csv
import json

import chess as pychess
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chessinterp.chess import parse_fen, parse_square
from chessinterp.fixtures import planted_corruption, planted_puzzles, write_lichess_csv
from chessinterp.model.synthetic import build_synthetic_model, random_init_like
from chessinterp.puzzles import (
    DatasetError,
    PuzzleRecord,
    PuzzleThresholds,
    dataset_hash,
    decide,
    filter_puzzle,
    ingest_lichess_csv,
    limit,
    load_dataset,
    save_dataset,
    split_dataset,
    subsplit,
)

HEADER = ["PuzzleId", "FEN", "Moves", "Rating"]


def write_rows(path, rows, header=HEADER):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# -- ingest ---------------------------------------------------------------------------


def test_three_move_row(tmp_path):
    p = write_rows(tmp_path / "a.csv", [["x1", "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1", "a1a4 a8a4 b2a4", "1500"]])
    res = ingest_lichess_csv(p, setup_move=False)
    assert res.rows == 1 and not res.skipped
    rec = res.records[0]
    assert [m.uci() for m in rec.pv] == ["a1a4", "a8a4", "b2a4"]
    assert rec.rating == 1500


def test_setup_move_applied(tmp_path):
    # black plays the setup move, then white solves
    p = write_rows(tmp_path / "a.csv", [["x1", "r6k/8/8/8/8/7r/1N6/R3K3 b - - 0 1", "h3h2 a1a4 a8a4 b2a4", "900"]])
    rec = ingest_lichess_csv(p).records[0]
    assert rec.board.white_to_move
    assert rec.fen.startswith("r6k/8/8/8/8/8/1N5r/R3K3 w")
    assert len(rec.pv) == 3


def test_illegal_first_move_skipped(tmp_path):
    p = write_rows(tmp_path / "a.csv", [["bad", "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1", "a1a8 a8a4 b2a4", "1"]])
    res = ingest_lichess_csv(p, setup_move=False)
    assert not res.records
    assert res.skipped == [(1, "bad", "illegal-pv")]


def test_ingest_conservation(tmp_path):
    good = "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1"
    rows = [["a", good, "a1a4 a8a4 b2a4", "1"], ["b", good, "a1a8 a8a4 b2a4", "1"], ["c", good, "a1a4", "1"],
            ["d", "garbage", "a1a4 a8a4 b2a4", "1"], ["e", good, "zz99", "1"], ["", good, "a1a4 a8a4 b2a4", "1"],
            ["g", good, "a1a4 a8a4 b2a4", "abc"]]
    res = ingest_lichess_csv(write_rows(tmp_path / "a.csv", rows), setup_move=False)
    assert res.rows == len(rows) == len(res.records) + len(res.skipped)
    assert sum(res.reason_counts.values()) == len(res.skipped)
    assert res.reason_counts == {"illegal-pv": 1, "short-pv": 1, "bad-fen": 1, "bad-move-syntax": 1,
                                 "missing-id": 1, "bad-rating": 1}


def test_ingest_errors(tmp_path):
    with pytest.raises(DatasetError):
        ingest_lichess_csv(tmp_path / "missing.csv")
    p = write_rows(tmp_path / "h.csv", [["x", "y"]], header=["PuzzleId", "FEN"])
    with pytest.raises(DatasetError, match="Moves"):
        ingest_lichess_csv(p)


def test_fixture_csv_round_trips(tmp_path):
    recs = planted_puzzles(20, seed=3)
    n = write_lichess_csv(tmp_path / "l.csv", recs)
    assert n == 20
    back = {r.id: r for r in ingest_lichess_csv(tmp_path / "l.csv").records}
    for r in recs:
        assert back[r.id].fen.split()[:2] == r.fen.split()[:2]
        assert back[r.id].pv == r.pv


# -- filter ---------------------------------------------------------------------------


def test_decide_examples():
    th = PuzzleThresholds()
    d = decide([0.9, 0.9, 0.9], [0.11, 0.9, 0.01], th)
    assert (d.keep, d.reason, d.move_index) == (False, "weak-too-strong", 1)
    d = decide([0.9, 0.9, 0.49], [0.01, 0.9, 0.01], th)
    assert (d.keep, d.reason, d.move_index) == (False, "strong-too-weak", 3)
    d = decide([0.9, 0.9, 0.9], [0.01, 0.49, 0.01], th)
    assert (d.keep, d.reason, d.move_index) == (False, "opponent-not-forced", 2)
    assert decide([0.9, 0.1, 0.9], [0.01, 0.9, 0.01], th).keep  # strong is not asked about opponent moves
    assert decide([0.5, 0.9, 0.5], [0.10, 0.5, 0.10], th).keep  # thresholds are strict


def test_decide_first_failure_wins():
    d = decide([0.1, 0.9, 0.1], [0.01, 0.1, 0.2])
    assert (d.reason, d.move_index) == ("weak-too-strong", 3)


class RecordingModel:
    """Stub that records which boards it saw and returns fixed probabilities."""

    def __init__(self, probs):
        self.probs = probs
        self.seen = []

    def evaluate_many(self, boards):
        self.seen.extend(boards)
        outer = self

        class Ev:
            def __init__(self, i):
                self.i = i

            def prob(self, move):
                return outer.probs[self.i]
        return [Ev(i) for i in range(len(boards))]


def test_filter_uses_successive_states():
    rec = PuzzleRecord("eq", "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1", ("a1a4", "a8a4", "b2a4"))
    strong, weak = RecordingModel([0.9, 0.9, 0.9]), RecordingModel([0.01, 0.9, 0.01])
    assert filter_puzzle(strong, weak, rec).keep
    assert strong.seen == rec.states[:3] == weak.seen
    assert [b.white_to_move for b in strong.seen] == [True, False, True]


def test_filter_is_pure():
    strong = build_synthetic_model(seed=0)
    weak = random_init_like(strong, 1)
    recs = planted_puzzles(6, seed=2)
    a = [filter_puzzle(strong, weak, r).to_dict() for r in recs]
    b = [filter_puzzle(strong, weak, r).to_dict() for r in recs]
    assert a == b


# -- squares and subsplit ---------------------------------------------------------------


def test_capture_on_landing_square_is_same_target():
    rec = PuzzleRecord("eq", "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1", ("a1a4", "a8a4", "b2a4"))
    assert subsplit(rec) == "same_target"
    # in player frames t1 and t2 differ because black sees the board flipped
    assert rec.t(1) == parse_square("a4") and rec.t(2) == parse_square("a5")
    other = PuzzleRecord("ne", "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1", ("a1a4", "h8g8", "a4a8"))
    assert subsplit(other) == "different_target"
    with pytest.raises(DatasetError):
        subsplit(PuzzleRecord("s", "r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1", ("a1a4",)))


def random_record(seed, plies=5):
    rng = np.random.default_rng(seed)
    b = pychess.Board()
    for _ in range(int(rng.integers(0, 30))):
        moves = list(b.legal_moves)
        if not moves:
            break
        b.push(moves[rng.integers(len(moves))])
    fen = b.fen()
    pv = []
    for _ in range(plies):
        moves = list(b.legal_moves)
        if not moves:
            break
        m = moves[rng.integers(len(moves))]
        pv.append(m.uci())
        b.push(m)
    return fen, pv


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_frame_dual_bookkeeping(seed):
    fen, pv = random_record(seed)
    if len(pv) < 3:
        return
    rec = PuzzleRecord("r", fen, tuple(pv))
    b = pychess.Board(fen)
    for j, uci in enumerate(pv, start=1):
        m = pychess.Move.from_uci(uci)
        flip = b.turn == pychess.BLACK
        want_s = pychess.square_mirror(m.from_square) if flip else m.from_square
        want_t = pychess.square_mirror(m.to_square) if flip else m.to_square
        assert (rec.s(j), rec.t(j)) == (want_s, want_t)
        assert rec.states[j - 1].white_to_move == (b.turn == pychess.WHITE)
        b.push(m)
    root_flip = pychess.Board(fen).turn == pychess.BLACK
    for j in range(1, 4):
        m = pychess.Move.from_uci(pv[j - 1])
        t = pychess.square_mirror(m.to_square) if root_flip else m.to_square
        assert rec.root_squares[f"t{j}"] == t
    # same_target is decided in the absolute frame
    same = pychess.Move.from_uci(pv[0]).to_square == pychess.Move.from_uci(pv[1]).to_square
    assert (rec.subsplit == "same_target") == same


# -- persistence ---------------------------------------------------------------------------


def test_round_trip_with_corruption(tmp_path):
    recs = planted_puzzles(5, seed=9)
    for r in recs:
        r.corruption = planted_corruption(r)
        r.corruption.diagnostics = {"weak_jsd": 0.125, "keep": True}
    save_dataset(tmp_path / "d.jsonl", reversed(recs))
    back = load_dataset(tmp_path / "d.jsonl")
    assert [r.id for r in back] == sorted(r.id for r in recs)
    by_id = {r.id: r for r in recs}
    for r in back:
        assert r.to_dict() == by_id[r.id].to_dict()
        assert r.corruption.diagnostics == {"weak_jsd": 0.125, "keep": True}
    assert dataset_hash(back) == dataset_hash(recs)


def test_load_rejects_illegal_pv(tmp_path):
    save_dataset(tmp_path / "d.jsonl", planted_puzzles(2, seed=9))
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    d = json.loads(lines[1])
    d["pv"][0] = "h8a1"
    lines[1] = json.dumps(d)
    (tmp_path / "d.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="illegal-pv"):
        load_dataset(tmp_path / "d.jsonl")


def test_load_rejects_version_mismatch(tmp_path):
    save_dataset(tmp_path / "d.jsonl", planted_puzzles(2, seed=9))
    lines = (tmp_path / "d.jsonl").read_text().splitlines()
    lines[0] = json.dumps({"format": "chessinterp-puzzles", "version": 99})
    (tmp_path / "d.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="v1"):
        load_dataset(tmp_path / "d.jsonl")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.jsonl")


def test_split_is_reproducible():
    recs = planted_puzzles(40, seed=1)
    a_train, a_eval = split_dataset(recs, seed=3)
    b_train, b_eval = split_dataset(list(reversed(recs)), seed=3)
    assert [r.id for r in a_train] == [r.id for r in b_train]
    assert len(a_train) == 28 and len(a_eval) == 12
    assert not {r.id for r in a_train} & {r.id for r in a_eval}
    assert [r.id for r in split_dataset(recs, seed=4)[0]] != [r.id for r in a_train]


def test_limit_is_sorted_prefix():
    recs = planted_puzzles(10, seed=1)
    assert [r.id for r in limit(list(reversed(recs)), 3)] == sorted(r.id for r in recs)[:3]
    assert len(limit(recs, None)) == 10


def test_record_squares_match_parse():
    rec = PuzzleRecord("b", parse_fen("r6k/8/8/8/8/8/1N6/R3K3 w - - 0 1").fen(), ("a1a4", "a8a4", "b2a4"))
    assert rec.squares == {"s1": 0, "t1": 24, "s2": 56 ^ 56, "t2": 24 ^ 56, "s3": 9, "t3": 24}
