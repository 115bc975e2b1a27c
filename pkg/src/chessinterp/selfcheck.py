"""Invariant suite on synthetic models; needs no downloads."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .chess.board import Board, perft
from .fixtures import planted_corruption, planted_puzzles
from .interventions import head_sweep, l12h12_experiment, residual_sweep
from .model.config import ModelSpec
from .model.synthetic import build_synthetic_model, plant_of, random_init_like
from .probes import ProbeHyper, cache_activations, evaluate, loss_and_grads, train_probe
from .stats import percentile_ci, propagate

KIWIPETE = "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1"


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _perft():
    got = [perft(Board.start(), d) for d in (1, 2, 3)] + [perft(Board.from_fen(KIWIPETE), 2)]
    return got == [20, 400, 8902, 2039], f"perft {got}"


def _identity():
    m = build_synthetic_model(seed=0)
    rec = planted_puzzles(1, seed=0)[0]
    sw = residual_sweep(m, rec.board, rec.board, rec.best_move, rec.id)
    hs = head_sweep(m, rec.board, rec.board, rec.best_move, rec.id)
    worst = max(np.abs(sw.delta).max(), np.abs(hs.delta).max())
    return worst == 0.0, f"max |delta| {worst}"


def _planted():
    m = build_synthetic_model(seed=0)
    plant = plant_of(m)
    ok, bad = 0, []
    recs = planted_puzzles(4, seed=0)
    for rec in recs:
        cor = planted_corruption(rec)
        sw = residual_sweep(m, rec.board, cor.board, rec.best_move, rec.id)
        hs = head_sweep(m, rec.board, cor.board, rec.best_move, rec.id)
        ex = l12h12_experiment(m, rec, *plant.copy_head)
        want = {plant.carrier, plant.readout}
        flagged = sw.flagged()
        if flagged == want and hs.flagged() == {plant.copy_head} and ex.single_delta > 1.5 \
                and abs(ex.complement_delta) < 0.5:
            ok += 1
        else:
            bad.append(rec.id)
    return not bad, f"{ok}/{len(recs)} puzzles recovered" + (f"; failed {bad}" if bad else "")


def _trace():
    m = random_init_like(build_synthetic_model(seed=0), seed=1)
    tr = m.forward(Board.start(), trace="full").trace
    s = (tr.qk_scores + tr.smolgen_scores).astype(np.float64)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    err = float(np.abs(z / z.sum(axis=-1, keepdims=True) - tr.attn).max())
    wdl = abs(float(tr.value_wdl.sum()) - 1.0)
    full = ModelSpec()
    ok = err < 1e-5 and wdl < 1e-6 and full.attention_entries == 1_474_560 and full.residual_sites == 960
    return ok, f"softmax err {err:.2e}, wdl err {wdl:.2e}"


def _gradient(seed):
    rng = np.random.default_rng(seed)
    B, d, k = 4, 6, 3
    R = rng.normal(size=(B, 64, d))
    U, V = rng.normal(size=(k, d)), rng.normal(size=(k, d))
    c = 0.3
    anchors, labels = rng.integers(0, 64, B), rng.integers(0, 64, B)
    _, dU, dV, dc = loss_and_grads(U, V, c, R, anchors, labels)
    worst, h = 0.0, 1e-6
    for P, G in ((U, dU), (V, dV)):
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            lp = loss_and_grads(U, V, c, R, anchors, labels)[0]
            P[idx] = old - h
            lm = loss_and_grads(U, V, c, R, anchors, labels)[0]
            P[idx] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - G[idx]) / max(abs(num), abs(G[idx]), 1e-8))
    return worst < 1e-4, f"max relative error {worst:.2e} (dc={dc:.3g})"


def _probes():
    m = build_synthetic_model(seed=0)
    recs = planted_puzzles(96, seed=0)
    store = cache_activations(m, recs, [m.spec.n_layers - 1])
    ids = store.ids
    hyper = ProbeHyper(rank=8, batch_size=16, epochs=20)
    layer = m.spec.n_layers - 1
    tp = train_probe(store, layer, "target", hyper, ids[:64])
    sp = train_probe(store, layer, "source", hyper, ids[:64])
    acc = evaluate(tp, sp, store, ids[64:], ids[:64])
    return acc["target_acc"] == 1.0 and acc["source_acc"] == 1.0, \
        f"target {acc['target_acc']:.3f} source {acc['source_acc']:.3f} on {acc['n']} held-out"


def _stats(seed, trials=300):
    rng = np.random.default_rng(seed)
    hit = 0
    for _ in range(trials):
        lo, hi = percentile_ci(rng.normal(size=100), 0.5)
        hit += lo <= 0.0 <= hi
    cov = hit / trials
    return cov >= 0.90 and propagate((3, 4)) == 5.0, f"median coverage {cov:.3f} over {trials} trials"


def run_checks(seed: int = 0) -> list:
    checks = [("perft", _perft), ("identity-patch", _identity), ("planted-recovery", _planted),
              ("trace-identities", _trace), ("probe-gradient", lambda: _gradient(seed)),
              ("probe-planted", _probes), ("percentile-coverage", lambda: _stats(seed))]
    out = []
    for name, fn in checks:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t))
    return out


if __name__ == "__main__":
    for r in run_checks():
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.detail} ({r.seconds:.2f}s)")
