"""Causal experiments: residual and head patching sweeps, attention-entry ablations.

Boards and moves come in the absolute frame; squares in results are in the
player frame of the clean board (the frame the model sees). The effect of an
intervention is the drop in log odds of the ground-truth move:
``delta = log_odds(p_clean) - log_odds(p_patched)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chess.board import Board, IllegalMoveError, orient_to_player
from .chess.squares import Move, square_name
from .model.engine import ActivationSite, HookSet, Model
from .model.outputs import PolicyOutput, policy_distribution

CLAMP = 1e-9
CATEGORIES = ("corrupted", "t1", "t3", "other")
PIECE_HEAD_KINDS = ("knight", "bishop", "rook")


def log_odds(p: float) -> float:
    """ln(p / (1 - p)) after clamping p to [1e-9, 1 - 1e-9]."""
    c = min(max(float(p), CLAMP), 1.0 - CLAMP)
    return math.log(c / (1.0 - c))


def is_clamped(p: float) -> bool:
    return not CLAMP <= p <= 1.0 - CLAMP


@dataclass(frozen=True)
class EffectRecord:
    puzzle_id: str
    site: Optional[ActivationSite]
    delta: float
    clean_prob: float
    patched_prob: float
    clamped: bool = False
    tag: str = ""

    @classmethod
    def make(cls, puzzle_id, site, clean_prob, patched_prob, tag="") -> "EffectRecord":
        delta = log_odds(clean_prob) - log_odds(patched_prob)
        return cls(puzzle_id, site, delta, float(clean_prob), float(patched_prob),
                   is_clamped(clean_prob) or is_clamped(patched_prob), tag)

    def to_dict(self) -> dict:
        s = self.site
        d = {"puzzle_id": self.puzzle_id, "delta": self.delta, "clean_prob": self.clean_prob,
             "patched_prob": self.patched_prob, "clamped": self.clamped}
        if s is not None:
            d.update({"kind": s.kind, "layer": s.layer + 1, "head": None if s.head is None else s.head + 1,
                      "square": None if s.square is None else square_name(s.square)})
            if s.kind == "attn_entry":
                d.update({"query": square_name(s.query), "key": square_name(s.key)})
        if self.tag:
            d["tag"] = self.tag
        return d


# -- helpers ---------------------------------------------------------------------------


@dataclass
class _Frame:
    board: Board  # player frame
    move: Move  # player frame
    feats: np.ndarray  # (64, width)


def _frame(model: Model, board: Board, move: Move) -> _Frame:
    pb = orient_to_player(board)
    pm = move.mirror() if pb.mirrored else move
    if not pb.is_legal(pm):
        raise IllegalMoveError(f"{move.uci()} is not legal in {board.fen()}")
    return _Frame(pb, pm, model.encode(pb).features())


def _probs(result, fr: _Frame) -> np.ndarray:
    """Probability of the frame's move for every item of a batch result."""
    out = np.empty(len(result))
    for i in range(len(result)):
        promo = None if result.promotion_offsets is None else result.promotion_offsets[i]
        out[i] = policy_distribution(PolicyOutput(result.policy_logits[i], promo), fr.board).prob(fr.move)
    return out


def _top_moves(result, fr: _Frame) -> list:
    out = []
    for i in range(len(result)):
        promo = None if result.promotion_offsets is None else result.promotion_offsets[i]
        out.append(policy_distribution(PolicyOutput(result.policy_logits[i], promo), fr.board).top())
    return out


def changed_squares(clean: Board, corrupted: Board) -> tuple:
    """Player-frame squares whose contents differ."""
    a, b = orient_to_player(clean), orient_to_player(corrupted)
    return tuple(sq for sq in range(64) if a.pieces[sq] != b.pieces[sq])


# -- residual sweep ----------------------------------------------------------------------


@dataclass
class ResidualSweep:
    puzzle_id: str
    clean_prob: float
    patched_prob: np.ndarray  # (n_layers, 64)
    delta: np.ndarray  # (n_layers, 64)
    top_changed: np.ndarray  # (n_layers, 64) bool
    t1: Optional[int] = None
    t3: Optional[int] = None
    corrupted: tuple = ()

    def records(self) -> list:
        out = []
        for layer in range(self.delta.shape[0]):
            for sq in range(64):
                out.append(EffectRecord.make(self.puzzle_id, ActivationSite.residual(layer, sq),
                                             self.clean_prob, self.patched_prob[layer, sq]))
        return out

    def categories(self, sq: int) -> tuple:
        cats = []
        if sq in self.corrupted:
            cats.append("corrupted")
        if sq == self.t1:
            cats.append("t1")
        if sq == self.t3:
            cats.append("t3")
        return tuple(cats) or ("other",)

    def category_effect(self, name: str) -> np.ndarray:
        """Per-layer effect for one category (mean over its squares; NaN if empty).

        A square may belong to several named categories; "other" excludes all of them.
        """
        if name == "other":
            cols = [sq for sq in range(64) if self.categories(sq) == ("other",)]
        else:
            cols = [sq for sq in range(64) if name in self.categories(sq)]
        if not cols:
            return np.full(self.delta.shape[0], np.nan)
        return self.delta[:, cols].mean(axis=1)

    def other_max(self) -> np.ndarray:
        """Per-layer maximum effect over the uncategorized squares."""
        cols = [sq for sq in range(64) if self.categories(sq) == ("other",)]
        return self.delta[:, cols].max(axis=1)

    def flagged(self, threshold: float = 0.5) -> set:
        return {int(sq) for sq in np.nonzero((np.abs(self.delta) > threshold).any(axis=0))[0]}


def residual_sweep(model: Model, clean: Board, corrupted: Board, best: Move, puzzle_id: str = "",
                   t3: Optional[int] = None, layers=None) -> ResidualSweep:
    """Patch every (layer, square) residual from the corrupted run into the clean run.

    One batched resume per layer: item q carries the clean residual with square q
    replaced, which is exactly a single-site residual write.
    """
    fr = _frame(model, clean, best)
    cr = orient_to_player(corrupted)
    if cr.mirrored != fr.board.mirrored:
        raise ValueError("clean and corrupted boards must have the same side to move")
    spec = model.spec
    base = model.run(np.stack([fr.feats, model.encode(cr).features()]), trace="full")
    clean_res, corr_res = base.trace.residual[0], base.trace.residual[1]
    clean_prob = float(_probs(_single(model, fr.feats), fr)[0])
    L = spec.n_layers
    patched = np.full((L, 64), clean_prob)
    top_changed = np.zeros((L, 64), dtype=bool)
    clean_top = _top_moves(_single(model, fr.feats), fr)[0]
    for layer in (range(L) if layers is None else layers):
        x = np.repeat(clean_res[layer][None], 64, axis=0)
        idx = np.arange(64)
        x[idx, idx] = corr_res[layer][idx]
        res = model.run(None, trace="none", resume=(layer, x))
        patched[layer] = _probs(res, fr)
        top_changed[layer] = [m != clean_top for m in _top_moves(res, fr)]
    delta = np.vectorize(log_odds)(clean_prob) - np.vectorize(log_odds)(patched)
    return ResidualSweep(puzzle_id, clean_prob, patched, delta, top_changed, fr.move.target, t3,
                         changed_squares(clean, corrupted))


def _single(model: Model, feats: np.ndarray):
    return model.run(feats[None], trace="none")


def patch_sites(model: Model, clean: Board, corrupted: Board, best: Move, sites, puzzle_id: str = "") -> list:
    """Reference path: one hooked forward per site (any kind), values read from the corrupted run."""
    fr = _frame(model, clean, best)
    cr = orient_to_player(corrupted)
    cf = model.encode(cr).features()
    sites = list(sites)
    reads = model.run(cf[None], HookSet(reads=frozenset(sites)), trace="none").trace.reads
    clean_prob = float(_probs(_single(model, fr.feats), fr)[0])
    out = []
    for s in sites:
        res = model.run(fr.feats[None], HookSet(writes={s: reads[s][0]}), trace="none")
        out.append(EffectRecord.make(puzzle_id, s, clean_prob, _probs(res, fr)[0]))
    return out


# -- head sweep -------------------------------------------------------------------------------


@dataclass
class HeadSweep:
    puzzle_id: str
    clean_prob: float
    patched_prob: np.ndarray  # (n_layers, n_heads)
    delta: np.ndarray

    def records(self) -> list:
        L, H = self.delta.shape
        return [EffectRecord.make(self.puzzle_id, ActivationSite.head_output(l, h), self.clean_prob,
                                  self.patched_prob[l, h]) for l in range(L) for h in range(H)]

    def flagged(self, threshold: float = 0.5) -> set:
        return {(int(l), int(h)) for l, h in zip(*np.nonzero(np.abs(self.delta) > threshold))}


def head_sweep(model: Model, clean: Board, corrupted: Board, best: Move, puzzle_id: str = "") -> HeadSweep:
    """Patch each head's full (64, d_head) output from the corrupted run, one head at a time."""
    fr = _frame(model, clean, best)
    cr = orient_to_player(corrupted)
    spec = model.spec
    L, H = spec.n_layers, spec.n_heads
    base = model.run(np.stack([fr.feats, model.encode(cr).features()]), trace="full")
    clean_heads, corr_heads = base.trace.head_out[0], base.trace.head_out[1]
    clean_res = base.trace.residual[0]
    clean_prob = float(_probs(_single(model, fr.feats), fr)[0])
    patched = np.empty((L, H))
    for layer in range(L):
        val = np.repeat(clean_heads[layer][None], H, axis=0)
        idx = np.arange(H)
        val[idx, idx] = corr_heads[layer][idx]
        hooks = HookSet(writes={ActivationSite.head_output(layer): val})
        if layer == 0:
            res = model.run(np.repeat(fr.feats[None], H, axis=0), hooks, trace="none")
        else:
            res = model.run(None, hooks, trace="none",
                            resume=(layer - 1, np.repeat(clean_res[layer - 1][None], H, axis=0)))
        patched[layer] = _probs(res, fr)
    delta = log_odds(clean_prob) - np.vectorize(log_odds)(patched)
    return HeadSweep(puzzle_id, clean_prob, patched, delta)


# -- attention-entry ablations ----------------------------------------------------------------


def ablate_attention_entries(model: Model, board: Board, entries, best: Move, puzzle_id: str = "",
                             mode: str = "zero", tag: str = "") -> EffectRecord:
    """Zero the listed (layer, head, query, key) post-softmax weights in one forward pass."""
    fr = _frame(model, board, best)
    entries = list(entries)
    clean = _single(model, fr.feats)
    hooks = HookSet.zero_attention(entries, mode=mode)
    patched = model.run(fr.feats[None], hooks, trace="none")
    site = ActivationSite.attn_entry(*entries[0]) if len(entries) == 1 else None
    return EffectRecord.make(puzzle_id, site, _probs(clean, fr)[0], _probs(patched, fr)[0], tag)


def top_move_after_ablation(model: Model, board: Board, entries, mode: str = "zero") -> Move:
    pb = orient_to_player(board)
    res = model.run(model.encode(pb).features()[None], HookSet.zero_attention(list(entries), mode), trace="none")
    promo = None if res.promotion_offsets is None else res.promotion_offsets[0]
    m = policy_distribution(PolicyOutput(res.policy_logits[0], promo), pb).top()
    return m.mirror() if pb.mirrored else m


def all_entries(layer: int, head: int, exclude=()) -> list:
    ex = set(exclude)
    return [(layer, head, q, k) for q in range(64) for k in range(64) if (q, k) not in ex]


@dataclass
class EntryExperiment:
    puzzle_id: str
    single_delta: float
    complement_delta: float
    entry_is_global_max: bool
    single: EffectRecord
    complement: EffectRecord

    def to_dict(self) -> dict:
        return {"puzzle_id": self.puzzle_id, "single_delta": self.single_delta,
                "complement_delta": self.complement_delta, "entry_is_global_max": self.entry_is_global_max,
                "single_clamped": self.single.clamped, "complement_clamped": self.complement.clamped}


class DegeneratePuzzle(ValueError):
    pass


def strict_argmax_is(scores: np.ndarray, q: int, k: int) -> bool:
    """True iff scores[q, k] is strictly larger than every other entry."""
    v = scores[q, k]
    others = np.delete(scores.reshape(-1), q * scores.shape[1] + k)
    return bool(np.all(v > others))


def l12h12_experiment(model: Model, puzzle, layer: int = 11, head: int = 11, mode: str = "zero") -> EntryExperiment:
    """Ablate the (query=t1, key=t3) entry of one head, and separately its 4095-entry complement."""
    t1, t3 = puzzle.t(1), puzzle.t(3)
    if t1 == t3:
        raise DegeneratePuzzle(f"{puzzle.id}: t1 == t3")
    board, best = puzzle.board, puzzle.best_move
    single = ablate_attention_entries(model, board, [(layer, head, t1, t3)], best, puzzle.id, mode, "single")
    comp = ablate_attention_entries(model, board, all_entries(layer, head, [(t1, t3)]), best, puzzle.id,
                                    mode, "complement")
    tr = model.forward(model.encode(orient_to_player(board)), trace="full").trace
    scores = tr.qk_scores[layer, head] + tr.smolgen_scores[layer, head]
    return EntryExperiment(puzzle.id, single.delta, comp.delta, strict_argmax_is(scores, t1, t3), single, comp)


# -- piece-movement-head ablation ----------------------------------------------------------------


def third_move_head_kind(puzzle) -> Optional[str]:
    """Head family for the 3rd PV move: queens map to rook or bishop heads by direction."""
    kind = puzzle.piece_kind(3)
    if kind in PIECE_HEAD_KINDS:
        return kind
    if kind == "queen":
        s, t = puzzle.s(3), puzzle.t(3)
        return "rook" if (s % 8 == t % 8 or s // 8 == t // 8) else "bishop"
    return None


class NoTaggedHeads(LookupError):
    pass


def _key_entries(heads, key: int, keep: tuple) -> list:
    return [(l, h, q, key) for (l, h) in heads for q in range(64) if (q, key) != keep]


def random_baseline_square(puzzle, seed: int = 0) -> int:
    """Uniform square outside {s1,t1,s2,t2,s3,t3, corrupted}; seeded by (seed, puzzle id)."""
    special = set(puzzle.root_squares.values()) | set(puzzle.corrupted_squares())
    pool = [sq for sq in range(64) if sq not in special]
    digest = np.frombuffer(puzzle.id.encode(), dtype=np.uint8)
    rng = np.random.default_rng([seed] + digest.tolist())
    return int(pool[rng.integers(len(pool))])


@dataclass
class PieceAblation:
    puzzle_id: str
    kind: str
    matched_delta: float
    other_type_delta: float  # NaN when no heads of the other kinds are tagged
    random_square_delta: float
    random_square: int
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"puzzle_id": self.puzzle_id, "kind": self.kind, "matched_delta": self.matched_delta,
                "other_type_delta": self.other_type_delta, "random_square_delta": self.random_square_delta,
                "random_square": square_name(self.random_square)}


def piece_head_ablation(model: Model, puzzle, tags, seed: int = 0, mode: str = "zero") -> PieceAblation:
    """Zero every entry keyed on t3 (except query s3) in the matching piece heads, plus two baselines."""
    if len(puzzle.pv) <= 3:
        raise ValueError(f"{puzzle.id}: PV must be longer than 3 moves")
    kind = third_move_head_kind(puzzle)
    matched = [(t.layer, t.head) for t in tags if t.piece_kind == kind]
    if kind is None or not matched:
        raise NoTaggedHeads(f"{puzzle.id}: no tagged heads for third-move piece {puzzle.piece_kind(3)}")
    others = [(t.layer, t.head) for t in tags if t.piece_kind in PIECE_HEAD_KINDS and t.piece_kind != kind]
    s3, t3 = puzzle.s(3), puzzle.t(3)
    rnd = random_baseline_square(puzzle, seed)
    board, best = puzzle.board, puzzle.best_move

    def run(heads, key, tag):
        return ablate_attention_entries(model, board, _key_entries(heads, key, (s3, key)), best, puzzle.id, mode, tag)

    recs = [run(matched, t3, "matched"), run(matched, rnd, "random_square")]
    other = run(others, t3, "other_type") if others else None
    if other is not None:
        recs.append(other)
    return PieceAblation(puzzle.id, kind, recs[0].delta, math.nan if other is None else other.delta,
                         recs[1].delta, rnd, recs)
