"""Low-rank bilinear probes for the third move's target and source squares.

    logit_y = (U r_y) . (V r_anchor) + c

r_y is the residual at square y after a given layer. The target probe is
anchored at t1 (the model's own top-move target) and predicts t3; the source
probe is anchored at t3 (ground truth while training, the target probe's
prediction in the pipeline) and predicts s3.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chess.board import orient_to_player
from .model.archive import read_archive, write_archive
from .model.engine import ActivationSite, HookSet
from .model.outputs import PolicyOutput, policy_distribution
from .stats import accuracy_sigma, propagate

STAGES = ("target", "source")


class ProbeError(RuntimeError):
    pass


# -- activation cache ------------------------------------------------------------------


@dataclass
class ActivationStore:
    ids: list
    layers: tuple
    residuals: dict  # layer -> (N, 64, d) float32
    t1: np.ndarray  # model's top-move target, player frame
    t3: np.ndarray
    s3: np.ndarray
    model_hash: str = ""
    dataset_hash: str = ""

    def __len__(self):
        return len(self.ids)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.model_hash.encode())
        h.update(self.dataset_hash.encode())
        for layer in self.layers:
            h.update(np.ascontiguousarray(self.residuals[layer]).tobytes())
        for a in (self.t1, self.t3, self.s3):
            h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
        return h.hexdigest()

    def index(self, ids) -> np.ndarray:
        pos = {pid: i for i, pid in enumerate(self.ids)}
        return np.array([pos[i] for i in ids], dtype=np.int64)

    def anchors_labels(self, stage: str, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if stage == "target":
            return self.t1[rows], self.t3[rows]
        if stage == "source":
            return self.t3[rows], self.s3[rows]
        raise ValueError(f"unknown stage {stage!r}")

    def save(self, path) -> str:
        tensors = {f"residual.{l}": self.residuals[l] for l in self.layers}
        for name in ("t1", "t3", "s3"):
            tensors[name] = getattr(self, name).astype(np.float32)
        cfg = {"kind": "activation-store", "ids": list(self.ids), "layers": list(self.layers),
               "model_hash": self.model_hash, "dataset_hash": self.dataset_hash}
        return write_archive(path, cfg, tensors)

    @classmethod
    def load(cls, path, model_hash: Optional[str] = None, dataset_hash: Optional[str] = None) -> "ActivationStore":
        cfg, t, _ = read_archive(path)
        if cfg.get("kind") != "activation-store":
            raise ProbeError(f"{path} is not an activation store")
        if model_hash is not None and cfg["model_hash"] != model_hash:
            raise ProbeError("activation store was cached from a different model")
        if dataset_hash is not None and cfg["dataset_hash"] != dataset_hash:
            raise ProbeError("activation store was cached from a different dataset")
        layers = tuple(cfg["layers"])
        return cls(list(cfg["ids"]), layers, {l: np.array(t[f"residual.{l}"]) for l in layers},
                   t["t1"].astype(np.int64), t["t3"].astype(np.int64), t["s3"].astype(np.int64),
                   cfg["model_hash"], cfg["dataset_hash"])


def cache_activations(model, dataset, layers, batch: int = 32, dataset_hash: str = "") -> ActivationStore:
    """Post-LayerNorm residuals of each puzzle's root position for the given (0-based) layers."""
    layers = tuple(int(l) for l in layers)
    recs = list(dataset)
    sites = [ActivationSite.residual(l) for l in layers]
    res_out = {l: [] for l in layers}
    t1 = []
    for i in range(0, len(recs), batch):
        chunk = recs[i:i + batch]
        boards = [orient_to_player(r.board) for r in chunk]
        res = model.run(model.features(boards), HookSet(reads=frozenset(sites)), trace="none")
        for s in sites:
            res_out[s.layer].append(res.trace.reads[s])
        for j, b in enumerate(boards):
            promo = None if res.promotion_offsets is None else res.promotion_offsets[j]
            t1.append(policy_distribution(PolicyOutput(res.policy_logits[j], promo), b).top().target)
    d = model.spec.d_model
    residuals = {l: (np.concatenate(v) if v else np.zeros((0, 64, d), np.float32)) for l, v in res_out.items()}
    return ActivationStore(
        [r.id for r in recs], layers, residuals, np.array(t1, dtype=np.int64),
        np.array([r.t(3) for r in recs], dtype=np.int64), np.array([r.s(3) for r in recs], dtype=np.int64),
        model.content_hash, dataset_hash,
    )


# -- probe -----------------------------------------------------------------------------------


@dataclass
class ProbeParams:
    U: np.ndarray  # (k, d)
    V: np.ndarray  # (k, d)
    c: float
    layer: int
    stage: str
    losses: list = field(default_factory=list)  # mean loss per epoch

    @property
    def rank(self) -> int:
        return self.U.shape[0]

    def effective_rank(self, tol: float = 1e-6) -> int:
        s = np.linalg.svd(self.U.T.astype(np.float64) @ self.V.astype(np.float64), compute_uv=False)
        return int((s > tol).sum())

    def save(self, path) -> str:
        cfg = {"kind": "bilinear-probe", "layer": self.layer, "stage": self.stage, "losses": self.losses}
        return write_archive(path, cfg, {"U": self.U, "V": self.V, "c": np.array([self.c], np.float32)})

    @classmethod
    def load(cls, path) -> "ProbeParams":
        cfg, t, _ = read_archive(path)
        if cfg.get("kind") != "bilinear-probe":
            raise ProbeError(f"{path} is not a probe archive")
        return cls(np.array(t["U"]), np.array(t["V"]), float(t["c"][0]), cfg["layer"], cfg["stage"],
                   list(cfg.get("losses", [])))


def probe_logits(params: ProbeParams, residuals: np.ndarray, anchor: int) -> np.ndarray:
    """64 logits for one position: residuals (64, d), anchor square."""
    r = np.asarray(residuals, dtype=np.float64)
    b = params.V @ r[anchor]
    return (r @ params.U.T) @ b + params.c


def _batch_logits(U, V, c, R, anchors):
    """R (B, 64, d); returns logits (B, 64), Z = R U^T (B, 64, k), b = V r_anchor (B, k)."""
    Z = R @ U.T
    b = R[np.arange(R.shape[0]), anchors] @ V.T
    return np.einsum("bsk,bk->bs", Z, b) + c, Z, b


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def loss_and_grads(U, V, c, R, anchors, labels):
    """Mean cross-entropy over 64 squares and its exact gradients (dU, dV, dc)."""
    B = R.shape[0]
    logits, Z, b = _batch_logits(U, V, c, R, anchors)
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    loss = float(np.mean(lse - logits[np.arange(B), labels]))
    g = _softmax(logits)
    g[np.arange(B), labels] -= 1.0
    g /= B
    RtG = np.einsum("bsd,bs->bd", R, g)  # sum_y g_y r_y
    dU = np.einsum("bk,bd->kd", b, RtG)
    ZtG = np.einsum("bsk,bs->bk", Z, g)
    dV = np.einsum("bk,bd->kd", ZtG, R[np.arange(B), anchors])
    dc = float(g.sum())
    return loss, dU, dV, dc


@dataclass(frozen=True)
class ProbeHyper:
    rank: int = 32
    lr: float = 1e-2
    batch_size: int = 64
    epochs: int = 5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0


class Adam:
    def __init__(self, shapes, lr, betas, eps):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def train_probe(store: ActivationStore, layer: int, stage: str, hyper: ProbeHyper = ProbeHyper(),
                ids=None) -> ProbeParams:
    """Adam on mean cross-entropy; the final incomplete batch of each epoch is dropped."""
    rows = np.arange(len(store)) if ids is None else store.index(ids)
    R_all = store.residuals[layer].astype(np.float64)
    d = R_all.shape[2]
    rng = np.random.default_rng(hyper.seed)
    U = rng.normal(0.0, 1.0 / math.sqrt(d), (hyper.rank, d))
    V = rng.normal(0.0, 1.0 / math.sqrt(d), (hyper.rank, d))
    c = np.zeros(())
    opt = Adam([U.shape, V.shape, ()], hyper.lr, hyper.betas, hyper.eps)
    n_batches = len(rows) // hyper.batch_size
    if n_batches == 0:
        raise ProbeError(f"{len(rows)} training items is less than one batch of {hyper.batch_size}")
    losses = []
    for epoch in range(hyper.epochs):
        order = rows[rng.permutation(len(rows))]
        total = 0.0
        for bi in range(n_batches):
            sel = order[bi * hyper.batch_size:(bi + 1) * hyper.batch_size]
            anchors, labels = store.anchors_labels(stage, sel)
            loss, dU, dV, dc = loss_and_grads(U, V, float(c), R_all[sel], anchors, labels)
            if not math.isfinite(loss):
                raise ProbeError(f"non-finite loss at layer {layer}, stage {stage}, epoch {epoch}, batch {bi}; "
                                 f"|U|={np.abs(U).max():.3g} |V|={np.abs(V).max():.3g}")
            U, V, c = opt.step([U, V, c], [dU, dV, np.asarray(dc)])
            total += loss
        losses.append(total / n_batches)
    return ProbeParams(U.astype(np.float32), V.astype(np.float32), float(c), layer, stage, losses)


def predict_third_move(target_probe: ProbeParams, source_probe: ProbeParams, residuals, t1: int) -> tuple[int, int]:
    """(t3_hat, s3_hat); argmax ties go to the lowest square index."""
    t3 = int(np.argmax(probe_logits(target_probe, residuals, t1)))
    s3 = int(np.argmax(probe_logits(source_probe, residuals, t3)))
    return t3, s3


def _predict_many(params: ProbeParams, R: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    logits, _, _ = _batch_logits(params.U.astype(np.float64), params.V.astype(np.float64), params.c,
                                 R.astype(np.float64), anchors)
    return np.argmax(logits, axis=1)


def evaluate(target_probe: ProbeParams, source_probe: ProbeParams, store: ActivationStore, eval_ids,
             train_ids=()) -> dict:
    """Accuracies on the eval split: target (anchor t1), source (anchor true t3), pipeline (both right)."""
    eval_ids = list(eval_ids)
    if not eval_ids:
        raise ProbeError("empty evaluation split")
    overlap = set(eval_ids) & set(train_ids)
    if overlap:
        raise ProbeError(f"{len(overlap)} puzzles are in both train and eval splits")
    rows = store.index(eval_ids)
    R = store.residuals[target_probe.layer][rows]
    t1, t3, s3 = store.t1[rows], store.t3[rows], store.s3[rows]
    t3_hat = _predict_many(target_probe, R, t1)
    s3_true_anchor = _predict_many(source_probe, R, t3)
    s3_hat = _predict_many(source_probe, R, t3_hat)
    n = len(rows)
    return {
        "n": n,
        "target_acc": float(np.mean(t3_hat == t3)),
        "source_acc": float(np.mean(s3_true_anchor == s3)),
        "pipeline_acc": float(np.mean((t3_hat == t3) & (s3_hat == s3))),
    }


@dataclass
class SeedSummary:
    layer: int
    metric: str
    accuracies: list
    n: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def sigma_train(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    @property
    def sigma_accuracy(self) -> float:
        return accuracy_sigma(self.mean, self.n)

    @property
    def sigma_total(self) -> float:
        return propagate([self.sigma_train, self.sigma_accuracy])

    def to_row(self) -> dict:
        return {"layer": self.layer + 1, "metric": self.metric, "mean_acc": self.mean,
                "two_sigma_total": 2 * self.sigma_total, "sigma_train": self.sigma_train,
                "sigma_accuracy": self.sigma_accuracy, "n": self.n, "runs": len(self.accuracies)}


def train_and_evaluate(store: ActivationStore, layer: int, train_ids, eval_ids, seeds=(0, 1, 2, 3, 4),
                       hyper: ProbeHyper = ProbeHyper()) -> dict:
    """Several seeded training runs; per-metric SeedSummary plus the trained probes."""
    runs, probes = [], []
    for s in seeds:
        h = ProbeHyper(hyper.rank, hyper.lr, hyper.batch_size, hyper.epochs, hyper.betas, hyper.eps, s)
        tp = train_probe(store, layer, "target", h, train_ids)
        sp = train_probe(store, layer, "source", h, train_ids)
        runs.append(evaluate(tp, sp, store, eval_ids, train_ids))
        probes.append((tp, sp))
    n = runs[0]["n"]
    out = {m: SeedSummary(layer, m, [r[m] for r in runs], n) for m in ("target_acc", "source_acc", "pipeline_acc")}
    out["probes"] = probes
    return out


# -- attention-score baseline -------------------------------------------------------------------------


def qk_baseline(model, dataset, layer: int, head: int, batch: int = 16) -> dict:
    """Use one head's pre-softmax scores as a zero-parameter target probe, in both orientations.

    "query_t1": t3_hat = argmax_k score[t1, k]   (t1 queries, t3 is the key)
    "key_t1":   t3_hat = argmax_q score[q, t1]   (t3 queries, t1 is the key)
    t1 is the model's own top-move target.
    """
    recs = list(dataset)
    hits = {"query_t1": 0, "key_t1": 0}
    for i in range(0, len(recs), batch):
        chunk = recs[i:i + batch]
        boards = [orient_to_player(r.board) for r in chunk]
        res = model.run(model.features(boards), trace="full")
        scores = res.trace.qk_scores[:, layer, head] + res.trace.smolgen_scores[:, layer, head]
        for j, (r, b) in enumerate(zip(chunk, boards)):
            promo = None if res.promotion_offsets is None else res.promotion_offsets[j]
            t1 = policy_distribution(PolicyOutput(res.policy_logits[j], promo), b).top().target
            hits["query_t1"] += int(np.argmax(scores[j][t1, :]) == r.t(3))
            hits["key_t1"] += int(np.argmax(scores[j][:, t1]) == r.t(3))
    n = len(recs)
    return {k: v / n for k, v in hits.items()} | {"n": n}
