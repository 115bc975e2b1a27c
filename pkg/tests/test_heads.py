import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chessinterp.chess import orient_to_player, reachability_mask
from chessinterp.chess.masks import kind_matrix
from chessinterp.fixtures import planted_puzzles
from chessinterp.heads import (
    KINDS,
    HeadTag,
    calibrate_threshold,
    count_by_kind,
    detect_piece_heads,
    load_tags,
    max_entry_statistic,
    piece_head_score,
    piece_head_scores,
    query_square,
    save_tags,
    tags_from_scores,
)
from chessinterp.model import Model
from chessinterp.model.synthetic import build_synthetic_model, plant_of, random_init_like, random_weights


@pytest.fixture(scope="module")
def planted():
    return build_synthetic_model(seed=0)


@pytest.fixture(scope="module")
def boards():
    return [r.board for r in planted_puzzles(40, seed=11)]


@pytest.fixture(scope="module")
def uniform(planted):
    cfg = random_init_like(planted, 0).config
    return Model(cfg, random_weights(cfg, 0, std=0.0), name="uniform")


def test_planted_knight_head_scores_one(planted, boards):
    plant = plant_of(planted)
    s = piece_head_score(planted, boards, *plant.knight_head, "knight")
    assert s == pytest.approx(1.0, abs=1e-4)


def test_uniform_head_scores_mask_density(uniform, boards):
    scores = piece_head_scores(uniform, boards)
    for k, kind in enumerate(KINDS):
        # independent oracle: popcount of each query's mask over 64, averaged over the sampled queries
        qs = [query_square(orient_to_player(b), 0) for b in boards]
        want = np.mean([bin(reachability_mask(q, kind)).count("1") / 64 for q in qs])
        np.testing.assert_allclose(scores[:, :, k], want, atol=1e-6)


def test_kind_scores_bounded(planted, boards):
    scores = piece_head_scores(planted, boards)
    assert np.all(scores >= 0) and np.all(scores <= 1 + 1e-6)
    assert np.all(scores.sum(axis=2) <= 1 + 1e-6)  # knight, bishop and rook masks are pairwise disjoint
    km = [kind_matrix(k).astype(bool) for k in KINDS]
    assert not (km[0] & km[1]).any() and not (km[0] & km[2]).any() and not (km[1] & km[2]).any()


def test_scores_independent_of_sample_order(planted, boards):
    a = piece_head_scores(planted, boards, seed=3)
    b = piece_head_scores(planted, list(reversed(boards)), seed=3)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert query_square(boards[0], 3) == query_square(boards[0], 3)


def test_detect_planted_knight_head(planted, boards):
    plant = plant_of(planted)
    tags = detect_piece_heads(planted, boards, 0.5)
    assert [(t.layer, t.head, t.piece_kind) for t in tags] == [(*plant.knight_head, "knight")]
    assert detect_piece_heads(planted, boards, 1.01) == []


@settings(max_examples=100)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 10**6))
def test_detection_monotone_in_threshold(a, b, seed):
    scores = np.random.default_rng(seed).dirichlet(np.ones(4), size=(3, 4))[..., :3]
    lo, hi = min(a, b), max(a, b)
    hi_tags = {(t.layer, t.head, t.piece_kind) for t in tags_from_scores(scores, hi)}
    lo_tags = {(t.layer, t.head, t.piece_kind) for t in tags_from_scores(scores, lo)}
    assert hi_tags <= lo_tags
    per_head = [(t.layer, t.head) for t in tags_from_scores(scores, lo)]
    assert len(per_head) == len(set(per_head))


def test_calibrate_hits_targets_when_reachable():
    rng = np.random.default_rng(0)
    scores = rng.uniform(0, 0.3, size=(15, 24, 3))
    # plant 2 knight, 3 bishop, 4 rook heads with clearly higher scores
    flat = rng.permutation(15 * 24)[:9]
    for i, (kind, sc) in enumerate([(0, 0.8)] * 2 + [(1, 0.7)] * 3 + [(2, 0.9)] * 4):
        l, h = divmod(int(flat[i]), 24)
        scores[l, h, kind] = sc
    th, counts = calibrate_threshold(scores, {"knight": 2, "bishop": 3, "rook": 4})
    assert counts == {"knight": 2, "bishop": 3, "rook": 4}
    assert count_by_kind(tags_from_scores(scores, th)) == counts


def test_tags_round_trip(tmp_path):
    tags = [HeadTag(11, 11, "rook", 0.75), HeadTag(0, 3, "knight", 0.5)]
    save_tags(tmp_path / "t.json", tags)
    assert load_tags(tmp_path / "t.json") == tags
    assert tags[0].label == "L12H12" and tags[0].to_dict()["layer"] == 12


def test_max_entry_planted(planted):
    plant = plant_of(planted)
    recs = planted_puzzles(10, seed=12)
    res = max_entry_statistic(planted, recs, *plant.copy_head)
    assert res.fraction == 1.0 and res.n == 10 and res.skipped == 0


def test_max_entry_constant_scores_is_zero(uniform):
    recs = planted_puzzles(5, seed=12)
    res = max_entry_statistic(uniform, recs, 0, 0)
    assert res.fraction == 0.0 and res.n == 5
