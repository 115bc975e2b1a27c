"""Command-line driver. Every command writes CSV/JSONL data plus a manifest.json.

Outputs are staged in a sibling directory and moved into place only when the
command succeeds; a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .chess.board import parse_fen
from .chess.squares import square_name
from .corruptions import FilterSettings, find_corruption
from .heads import (TARGET_TAG_COUNTS, calibrate_threshold, count_by_kind, load_tags, piece_head_scores, save_tags,
                    tags_from_scores)
from .interventions import (DegeneratePuzzle, NoTaggedHeads, head_sweep, l12h12_experiment, piece_head_ablation,
                            residual_sweep)
from .model.archive import ArchiveError, write_archive
from .model.engine import HookError, ModelLoadError, NumericFault, load_weights
from .probes import (ProbeError, ProbeHyper, ProbeParams, cache_activations, evaluate, qk_baseline,
                     train_and_evaluate)
from .puzzles import (DIFFERENT_TARGET, SAME_TARGET, DatasetError, PuzzleThresholds, dataset_hash, filter_puzzle,
                      ingest_lichess_csv, limit, load_dataset, save_dataset, split_dataset)
from .stats import PERCENTILE_GRID, PercentileCurve, mean_sem

log = logging.getLogger("chessinterp")

OUTPUT_VERSION = 1

# Defaults for every command. The piece-head threshold has not been calibrated
# against real weights; `detect-heads --calibrate` fits it to the 22/27/29 counts.
DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "limit": None,
    "min_pv": 3,
    "weak_threshold": 0.10,
    "strong_threshold": 0.50,
    "opponent_threshold": 0.50,
    "setup_move": True,
    "strong_max_prob": 0.10,
    "weak_max_drop": 0.2,
    "value_max_gain": 0.1,
    "filters": "abc",
    "effect_threshold": 1.5,
    "layer": 12,
    "head": 12,
    "head_threshold": 0.5,
    "head_sample": 64,
    "attention_mode": "zero",
    "probe_rank": 32,
    "probe_lr": 1e-2,
    "probe_batch_size": 64,
    "probe_epochs": 5,
    "probe_seeds": 5,
    "train_fraction": 0.7,
    "trace_level": "full",
}


class UsageError(Exception):
    pass


# Failures inside a command that are reported as a one-line error (exit 1) rather than a traceback.
RUN_ERRORS = (DatasetError, ArchiveError, ModelLoadError, ProbeError, HookError, NumericFault, NoTaggedHeads)


# -- run scaffolding ---------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Staging directory + manifest for one command invocation."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.hashes = {"model": None, "weak_model": None, "dataset": None}
        self.extra = {}
        self.dir = None

    def __enter__(self):
        if self.out.exists() and any(self.out.iterdir()):
            raise UsageError(f"output directory {self.out} exists and is not empty")
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.partial-", dir=self.out.parent))
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.dir, ignore_errors=True)
            return False
        files = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file():
                files[str(p.relative_to(self.dir))] = _sha256_file(p)
        cfg_clean = {k: v for k, v in sorted(self.cfg.items()) if k not in ("out", "config")}
        manifest = {
            "format": "chessinterp-run",
            "version": OUTPUT_VERSION,
            "package_version": __version__,
            "command": self.command,
            "config": cfg_clean,
            "config_hash": hashlib.sha256(json.dumps(cfg_clean, sort_keys=True, default=str).encode()).hexdigest(),
            "model_hash": self.hashes["model"],
            "weak_model_hash": self.hashes["weak_model"],
            "dataset_hash": self.hashes["dataset"],
            "seed": self.cfg.get("seed"),
            "files": files,
        } | self.extra
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        if self.out.exists():
            self.out.rmdir()
        self.dir.rename(self.out)
        return False

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def write_jsonl(path: Path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def pmap(fn, items, jobs: int) -> list:
    """Ordered map, threaded when jobs > 1."""
    items = list(items)
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _require(cfg: dict, key: str, what: str):
    if not cfg.get(key):
        raise UsageError(f"missing input: --{key.replace('_', '-')} ({what})")
    p = Path(cfg[key])
    if not p.exists():
        raise UsageError(f"missing input: {p} ({what}) does not exist")
    return p


def _model(cfg, run: Run, key="weights", slot="model"):
    p = _require(cfg, key, "model weight archive")
    _, model = load_weights(p)
    run.hashes[slot] = model.content_hash
    return model


def _dataset(cfg, run: Run, need_corruption=False):
    p = _require(cfg, "dataset", "puzzle dataset JSONL")
    recs = load_dataset(p, cfg["min_pv"])
    run.hashes["dataset"] = dataset_hash(recs)
    recs = limit(recs, cfg["limit"])
    if need_corruption:
        missing = sum(r.corruption is None for r in recs)
        recs = [r for r in recs if r.corruption is not None]
        run.extra["skipped_no_corruption"] = missing
    return recs


def _curve_rows(series: dict):
    for name, values in series.items():
        if len(values) < 20:
            continue
        c = PercentileCurve.from_samples(values)
        for p, v, lo, hi in c.rows():
            yield [name, f"{p:.3f}", v, lo, hi, c.n]


def _bar(values):
    values = [v for v in values if not math.isnan(v)]
    if len(values) < 2:
        return (values[0] if values else math.nan), math.nan, len(values)
    m, s = mean_sem(values)
    return m, 2 * s, len(values)


# -- commands ---------------------------------------------------------------------------------


def cmd_filter_puzzles(cfg, run: Run):
    strong = _model(cfg, run)
    weak = _model(cfg, run, "weak_weights", "weak_model")
    summary = []
    if cfg.get("csv"):
        ing = ingest_lichess_csv(_require(cfg, "csv", "Lichess puzzle CSV"), cfg["setup_move"], cfg["min_pv"])
        recs = ing.records
        summary += [("rows_read", ing.rows), ("ingested", len(ing.records)), ("skipped", len(ing.skipped))]
        summary += [(f"skipped_{k}", v) for k, v in sorted(ing.reason_counts.items())]
        write_jsonl(run.path("skipped.jsonl"), [{"row": n, "id": i, "reason": r} for n, i, r in ing.skipped])
        run.hashes["dataset"] = _sha256_file(Path(cfg["csv"]))
    else:
        p = _require(cfg, "dataset", "puzzle dataset JSONL or --csv")
        recs = load_dataset(p, cfg["min_pv"])
        run.hashes["dataset"] = dataset_hash(recs)
    recs = limit(recs, cfg["limit"])
    th = PuzzleThresholds(cfg["weak_threshold"], cfg["strong_threshold"], cfg["opponent_threshold"])
    decisions = pmap(lambda r: filter_puzzle(strong, weak, r, th), recs, cfg["jobs"])
    kept = [r for r, d in zip(recs, decisions) if d.keep]
    save_dataset(run.path("puzzles.jsonl"), kept)
    write_jsonl(run.path("decisions.jsonl"), [{"id": r.id} | d.to_dict() for r, d in zip(recs, decisions)])
    reasons = {}
    for d in decisions:
        if not d.keep:
            reasons[d.reason] = reasons.get(d.reason, 0) + 1
    summary += [("considered", len(recs)), ("kept", len(kept)), ("discarded", len(recs) - len(kept))]
    summary += [(f"discarded_{k}", v) for k, v in sorted(reasons.items())]

    def frac(rs):
        return sum(r.subsplit == SAME_TARGET for r in rs) / len(rs) if rs else math.nan

    summary += [("same_target_fraction_input", frac(recs)), ("same_target_fraction_kept", frac(kept))]
    write_csv(run.path("summary.csv"), ["metric", "value"], summary)
    return 0


def cmd_find_corruptions(cfg, run: Run):
    strong = _model(cfg, run)
    weak = _model(cfg, run, "weak_weights", "weak_model")
    recs = _dataset(cfg, run)
    flt = cfg["filters"]
    settings = FilterSettings(cfg["strong_max_prob"], cfg["weak_max_drop"], cfg["value_max_gain"],
                              "a" in flt, "b" in flt, "c" in flt)

    def one(r):
        choice, n, survivors = find_corruption(strong, weak, r, settings)
        return choice, n, len(survivors)

    results = pmap(one, recs, cfg["jobs"])
    found, rows = [], []
    for r, (choice, n, k) in zip(recs, results):
        item = {"id": r.id, "candidates": n, "survivors": k}
        if choice is None:
            item["status"] = "no-corruption-found"
        else:
            r.corruption = choice
            found.append(r)
            item |= {"status": "ok"} | choice.to_dict()
        rows.append(item)
    save_dataset(run.path("puzzles.jsonl"), found)
    write_jsonl(run.path("corruptions.jsonl"), rows)
    cands = [x["candidates"] for x in rows]
    write_csv(run.path("summary.csv"), ["metric", "value"], [
        ("puzzles", len(recs)), ("with_corruption", len(found)), ("no_corruption_found", len(recs) - len(found)),
        ("mean_candidates", float(np.mean(cands)) if cands else math.nan),
        ("mean_survivors", float(np.mean([x["survivors"] for x in rows])) if rows else math.nan),
    ])
    return 0


def cmd_patch_residual(cfg, run: Run):
    model = _model(cfg, run)
    recs = _dataset(cfg, run, need_corruption=True)
    sweeps = pmap(lambda r: residual_sweep(model, r.board, r.corruption.board, r.best_move, r.id, t3=r.t(3)),
                  recs, cfg["jobs"])
    L = model.spec.n_layers
    with open(run.path("effects.jsonl"), "w", encoding="utf-8") as fh:
        for sw in sweeps:
            for rec in sw.records():
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    per_puzzle = []
    for r, sw in zip(recs, sweeps):
        m = {}
        for layer in range(L):
            for cat in ("corrupted", "t1", "t3", "other"):
                m[f"L{layer + 1}_{cat}"] = float(sw.category_effect(cat)[layer])
            m[f"L{layer + 1}_other_max"] = float(sw.other_max()[layer])
        per_puzzle.append({"id": r.id, "subsplit": r.subsplit, "metrics": m})
    write_jsonl(run.path("per_puzzle.jsonl"), per_puzzle)
    rows = []
    for layer in range(L):
        for cat in ("corrupted", "t1", "t3", "other", "other_max"):
            vals = [p["metrics"][f"L{layer + 1}_{cat}"] for p in per_puzzle]
            rows.append([layer + 1, cat, *_bar(vals)])
    write_csv(run.path("summary.csv"), ["layer", "category", "mean_delta", "two_sem", "n"], rows)
    grid = np.mean([sw.delta for sw in sweeps], axis=0) if sweeps else np.zeros((L, 64))
    write_csv(run.path("grid.csv"), ["layer", "square", "mean_delta", "n"],
              ([l + 1, square_name(q), float(grid[l, q]), len(sweeps)] for l in range(L) for q in range(64)))
    return 0


def cmd_patch_heads(cfg, run: Run):
    model = _model(cfg, run)
    recs = _dataset(cfg, run, need_corruption=True)
    sweeps = pmap(lambda r: head_sweep(model, r.board, r.corruption.board, r.best_move, r.id), recs, cfg["jobs"])
    L, H = model.spec.n_layers, model.spec.n_heads
    write_jsonl(run.path("effects.jsonl"), (e.to_dict() for sw in sweeps for e in sw.records()))
    write_jsonl(run.path("per_puzzle.jsonl"), (
        {"id": r.id, "subsplit": r.subsplit,
         "metrics": {f"L{l + 1}H{h + 1}": float(sw.delta[l, h]) for l in range(L) for h in range(H)}}
        for r, sw in zip(recs, sweeps)))
    rows = []
    for l in range(L):
        for h in range(H):
            rows.append([l + 1, h + 1, *_bar([float(sw.delta[l, h]) for sw in sweeps])])
    write_csv(run.path("grid.csv"), ["layer", "head", "mean_delta", "two_sem", "n"], rows)
    ranked = sorted(rows, key=lambda r: (-r[2] if not math.isnan(r[2]) else math.inf, r[0], r[1]))
    write_csv(run.path("summary.csv"), ["rank", "head", "mean_delta", "two_sem", "n"],
              ([i + 1, f"L{r[0]}H{r[1]}", r[2], r[3], r[4]] for i, r in enumerate(ranked[:20])))
    return 0


def cmd_ablate_l12h12(cfg, run: Run):
    model = _model(cfg, run)
    recs = _dataset(cfg, run)
    layer, head = cfg["layer"] - 1, cfg["head"] - 1

    def one(r):
        try:
            return l12h12_experiment(model, r, layer, head, cfg["attention_mode"])
        except DegeneratePuzzle:
            return None

    results = pmap(one, recs, cfg["jobs"])
    ok = [(r, x) for r, x in zip(recs, results) if x is not None]
    write_jsonl(run.path("results.jsonl"), ({"subsplit": r.subsplit} | x.to_dict() for r, x in ok))
    write_jsonl(run.path("per_puzzle.jsonl"), (
        {"id": r.id, "subsplit": r.subsplit,
         "metrics": {"single_delta": x.single_delta, "complement_delta": x.complement_delta,
                     "entry_is_global_max": float(x.entry_is_global_max),
                     "single_gt_threshold": float(x.single_delta > cfg["effect_threshold"])}} for r, x in ok))
    single = [x.single_delta for _, x in ok]
    comp = [x.complement_delta for _, x in ok]
    write_csv(run.path("curves.csv"), ["series", "p", "value", "lo", "hi", "n"],
              _curve_rows({"single": single, "complement": comp}))
    n = len(ok)
    write_csv(run.path("summary.csv"), ["metric", "value"], [
        ("head", f"L{layer + 1}H{head + 1}"), ("puzzles", n), ("skipped_t1_eq_t3", len(recs) - n),
        ("fraction_entry_is_global_max", sum(x.entry_is_global_max for _, x in ok) / n if n else math.nan),
        (f"fraction_single_delta_gt_{cfg['effect_threshold']}",
         sum(d > cfg["effect_threshold"] for d in single) / n if n else math.nan),
        ("mean_single_delta", _bar(single)[0]), ("mean_complement_delta", _bar(comp)[0]),
    ])
    return 0


def cmd_detect_heads(cfg, run: Run):
    model = _model(cfg, run)
    recs = _dataset(cfg, run)[: cfg["head_sample"]]
    scores = piece_head_scores(model, [r.board for r in recs], cfg["seed"])
    th = cfg["head_threshold"]
    if cfg.get("calibrate"):
        th, _ = calibrate_threshold(scores, TARGET_TAG_COUNTS)
    tags = tags_from_scores(scores, th)
    save_tags(run.path("tags.json"), tags)
    L, H, _ = scores.shape
    write_csv(run.path("scores.csv"), ["layer", "head", "knight", "bishop", "rook"],
              ([l + 1, h + 1, *map(float, scores[l, h])] for l in range(L) for h in range(H)))
    counts = count_by_kind(tags)
    write_csv(run.path("summary.csv"), ["metric", "value"],
              [("boards", len(recs)), ("threshold", float(th)), ("calibrated", bool(cfg.get("calibrate")))]
              + [(f"{k}_heads", v) for k, v in counts.items()] + [("total_heads", L * H)])
    return 0


def cmd_ablate_piece_heads(cfg, run: Run):
    model = _model(cfg, run)
    recs = _dataset(cfg, run)
    tags = load_tags(_require(cfg, "tags", "head tags from detect-heads"))

    def one(r):
        if len(r.pv) <= 3:
            return "pv-too-short"
        try:
            return piece_head_ablation(model, r, tags, cfg["seed"], cfg["attention_mode"])
        except NoTaggedHeads:
            return "no-tagged-heads"

    results = pmap(one, recs, cfg["jobs"])
    ok = [(r, x) for r, x in zip(recs, results) if not isinstance(x, str)]
    skipped = {}
    for x in results:
        if isinstance(x, str):
            skipped[x] = skipped.get(x, 0) + 1
    write_jsonl(run.path("results.jsonl"), ({"subsplit": r.subsplit} | x.to_dict() for r, x in ok))
    thr = cfg["effect_threshold"]
    write_jsonl(run.path("per_puzzle.jsonl"), (
        {"id": r.id, "subsplit": r.subsplit,
         "metrics": {"matched_delta": x.matched_delta, "other_type_delta": x.other_type_delta,
                     "random_square_delta": x.random_square_delta,
                     "matched_ge_threshold": float(x.matched_delta >= thr)}} for r, x in ok))
    series = {"matched": [x.matched_delta for _, x in ok],
              "other_type": [x.other_type_delta for _, x in ok if not math.isnan(x.other_type_delta)],
              "random_square": [x.random_square_delta for _, x in ok]}
    write_csv(run.path("curves.csv"), ["series", "p", "value", "lo", "hi", "n"], _curve_rows(series))
    n = len(ok)
    dominance = {}
    for base in ("other_type", "random_square"):
        if len(series["matched"]) >= 20 and len(series[base]) >= 20:
            a = PercentileCurve.from_samples(series["matched"])
            b = PercentileCurve.from_samples(series[base])
            sel = (PERCENTILE_GRID >= 0.2) & (PERCENTILE_GRID <= 0.9)
            dominance[base] = bool(np.all(a.value[sel] >= b.value[sel]))
    write_csv(run.path("summary.csv"), ["metric", "value"],
              [("eligible", n)] + [(f"skipped_{k}", v) for k, v in sorted(skipped.items())]
              + [(f"fraction_matched_ge_{thr}", sum(d >= thr for d in series["matched"]) / n if n else math.nan)]
              + [(f"matched_dominates_{k}_p0.2_0.9", v) for k, v in dominance.items()])
    return 0


def _parse_layers(text, n_layers):
    if not text:
        return list(range(n_layers))
    return [int(x) - 1 for x in str(text).split(",")]


def _hyper(cfg) -> ProbeHyper:
    return ProbeHyper(cfg["probe_rank"], cfg["probe_lr"], cfg["probe_batch_size"], cfg["probe_epochs"])


def _probe_rows(tag, summaries):
    for s in summaries:
        row = s.to_row()
        yield [tag, row["layer"], row["metric"], row["mean_acc"], row["two_sigma_total"], row["sigma_train"],
               row["sigma_accuracy"], row["n"], row["runs"]]


PROBE_HEADER = ["model", "layer", "metric", "mean_acc", "two_sigma_total", "sigma_train", "sigma_accuracy", "n",
                "runs"]


def cmd_train_probes(cfg, run: Run):
    from .model.synthetic import random_init_like

    model = _model(cfg, run)
    recs = _dataset(cfg, run)
    train, test = split_dataset(recs, cfg["seed"], cfg["train_fraction"])
    train_ids, eval_ids = [r.id for r in train], [r.id for r in test]
    (run.path("split.json")).write_text(json.dumps({"train": train_ids, "eval": eval_ids}, indent=1))
    layers = _parse_layers(cfg.get("layers"), model.spec.n_layers)
    models = [("model", model)]
    if cfg.get("random_baseline"):
        models.append(("random_init", random_init_like(model, cfg["seed"] + 1)))
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["probe_seeds"]))
    rows, loss_rows = [], []
    for tag, m in models:
        for layer in layers:
            store = cache_activations(m, recs, [layer], dataset_hash=run.hashes["dataset"])
            out = train_and_evaluate(store, layer, train_ids, eval_ids, seeds, _hyper(cfg))
            rows += _probe_rows(tag, [out["target_acc"], out["source_acc"], out["pipeline_acc"]])
            for seed, (tp, sp) in zip(seeds, out["probes"]):
                for p in (tp, sp):
                    p.save(run.path(f"probes/{tag}/L{layer + 1}_seed{seed}_{p.stage}"))
                    loss_rows += [[tag, layer + 1, seed, p.stage, e + 1, v] for e, v in enumerate(p.losses)]
    write_csv(run.path("accuracy.csv"), PROBE_HEADER, rows)
    write_csv(run.path("losses.csv"), ["model", "layer", "seed", "stage", "epoch", "loss"], loss_rows)
    return 0


def cmd_eval_probes(cfg, run: Run):
    from .model.synthetic import random_init_like
    from .probes import SeedSummary

    model = _model(cfg, run)
    recs = _dataset(cfg, run)
    pdir = _require(cfg, "probes", "train-probes output directory")
    split = json.loads((pdir / "split.json").read_text())
    train_ids, eval_ids = split["train"], split["eval"]
    train_cfg = json.loads((pdir / "manifest.json").read_text())
    models = {"model": model}
    if (pdir / "probes" / "random_init").exists():
        models["random_init"] = random_init_like(model, train_cfg["config"]["seed"] + 1)
    rows = []
    for tag, m in models.items():
        by_layer = {}
        for tdir in sorted((pdir / "probes" / tag).glob("L*_target")):
            layer_s, seed_s, _ = tdir.name.split("_")
            by_layer.setdefault(int(layer_s[1:]) - 1, []).append(seed_s)
        for layer in sorted(by_layer):
            store = cache_activations(m, recs, [layer], dataset_hash=run.hashes["dataset"])
            runs = []
            for seed_s in sorted(by_layer[layer]):
                tp = ProbeParams.load(pdir / "probes" / tag / f"L{layer + 1}_{seed_s}_target")
                sp = ProbeParams.load(pdir / "probes" / tag / f"L{layer + 1}_{seed_s}_source")
                runs.append(evaluate(tp, sp, store, eval_ids, train_ids))
            rows += _probe_rows(tag, [SeedSummary(layer, k, [r[k] for r in runs], runs[0]["n"])
                                      for k in ("target_acc", "source_acc", "pipeline_acc")])
    write_csv(run.path("accuracy.csv"), PROBE_HEADER, rows)
    if cfg.get("qk_head"):
        l, h = (int(x) - 1 for x in str(cfg["qk_head"]).split(","))
        ev = [r for r in recs if r.id in set(eval_ids)]
        qk = qk_baseline(model, ev, l, h)
        write_csv(run.path("qk_baseline.csv"), ["head", "orientation", "target_acc", "n"],
                  [[f"L{l + 1}H{h + 1}", k, qk[k], qk["n"]] for k in ("query_t1", "key_t1")])
    return 0


def cmd_subsplit_report(cfg, run: Run):
    recs = _dataset(cfg, run)
    split_of = {r.id: r.subsplit for r in recs}
    rows = []
    for rdir in sorted(Path(p) for p in (cfg.get("runs") or [])):
        pp = rdir / "per_puzzle.jsonl"
        if not pp.exists():
            raise UsageError(f"missing input: {pp} (per-puzzle results of an experiment run)")
        exp = json.loads((rdir / "manifest.json").read_text())["command"]
        items = [x for x in read_jsonl(pp) if x["id"] in split_of]
        metrics = sorted({k for x in items for k in x["metrics"]})
        for metric in metrics:
            for split in ("all", SAME_TARGET, DIFFERENT_TARGET):
                vals = [x["metrics"][metric] for x in items
                        if split == "all" or split_of[x["id"]] == split]
                rows.append([exp, rdir.name, metric, split, *_bar(vals)])
    write_csv(run.path("subsplit.csv"), ["experiment", "run", "metric", "split", "mean", "two_sem", "n"], rows)
    counts = {s: sum(v == s for v in split_of.values()) for s in (SAME_TARGET, DIFFERENT_TARGET)}
    write_csv(run.path("summary.csv"), ["metric", "value"],
              [("puzzles", len(recs))] + [(f"{k}_puzzles", v) for k, v in counts.items()])
    return 0


def cmd_selfcheck(cfg, run: Run):
    from .selfcheck import run_checks

    results = run_checks(seed=cfg["seed"])
    write_csv(run.path("selfcheck.csv"), ["check", "passed", "detail", "seconds"],
              ([r.name, r.passed, r.detail, round(r.seconds, 3)] for r in results))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def cmd_make_fixture(cfg, run: Run):
    from .fixtures import planted_corruption, planted_puzzles, write_lichess_csv
    from .model.synthetic import build_synthetic_model, random_init_like

    planted = build_synthetic_model(seed=cfg["seed"])
    weak = random_init_like(planted, cfg["seed"] + 1)
    planted.save(run.path("planted"))
    weak.save(run.path("weak"))
    recs = planted_puzzles(cfg.get("n") or 200, seed=cfg["seed"])
    write_lichess_csv(run.path("lichess.csv"), recs, seed=cfg["seed"])
    for r in recs:
        r.corruption = planted_corruption(r)
    save_dataset(run.path("puzzles.jsonl"), recs)
    run.hashes.update(model=planted.content_hash, weak_model=weak.content_hash, dataset=dataset_hash(recs))
    return 0


def cmd_trace(cfg, run: Run):
    model = _model(cfg, run)
    if not cfg.get("fen"):
        raise UsageError("missing input: --fen (position to evaluate)")
    board = parse_fen(cfg["fen"])
    ev = model.evaluate(board)
    moves = [(m.mirror() if ev.mirrored else m).uci() for m in ev.dist.moves]
    order = np.argsort(-ev.dist.probs, kind="stable")
    write_csv(run.path("moves.csv"), ["move", "prob"], ([moves[i], float(ev.dist.probs[i])] for i in order))
    write_csv(run.path("value.csv"), ["win", "draw", "loss"], [list(map(float, ev.wdl))])
    res = model.forward(board.orient_to_player(), trace=cfg["trace_level"])
    tr = res.trace
    tensors = {k: getattr(tr, k) for k in ("embedding", "residual", "qk_scores", "smolgen_scores", "attn",
                                           "head_out", "policy_logits") if getattr(tr, k) is not None}
    if tensors:
        write_archive(run.path("trace"), {"kind": "forward-trace", "fen": board.fen()}, tensors)
    return 0


COMMANDS = {
    "filter-puzzles": cmd_filter_puzzles,
    "find-corruptions": cmd_find_corruptions,
    "patch-residual": cmd_patch_residual,
    "patch-heads": cmd_patch_heads,
    "ablate-l12h12": cmd_ablate_l12h12,
    "detect-heads": cmd_detect_heads,
    "ablate-piece-heads": cmd_ablate_piece_heads,
    "train-probes": cmd_train_probes,
    "eval-probes": cmd_eval_probes,
    "subsplit-report": cmd_subsplit_report,
    "selfcheck": cmd_selfcheck,
    "make-fixture": cmd_make_fixture,
    "trace": cmd_trace,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chessinterp", description="Look-ahead interpretability experiments")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", help="YAML or JSON file with option values (flags override)")
        p.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--jobs", type=int, default=S, help="worker threads across puzzles")
        p.add_argument("--limit", type=int, default=S, help="first N puzzles by sorted id")
        p.add_argument("-v", "--verbose", action="store_true")

    def models(p, weak=False):
        p.add_argument("--weights", default=S, help="model weight archive")
        if weak:
            p.add_argument("--weak-weights", default=S, help="weak reference model archive")
        p.add_argument("--trace-level", choices=("none", "policy", "full"), default=S)

    def dataset(p):
        p.add_argument("--dataset", default=S, help="puzzle dataset JSONL")
        p.add_argument("--min-pv", type=int, default=S)

    def mode(p):
        p.add_argument("--attention-mode", choices=("zero", "mask"), default=S,
                       help="zero post-softmax weights (default) or mask scores to -inf")

    p = sub.add_parser("filter-puzzles", help="keep puzzles the strong model solves and the weak one does not")
    common(p), models(p, weak=True), dataset(p)
    p.add_argument("--csv", default=S, help="Lichess puzzle CSV (instead of --dataset)")
    p.add_argument("--no-setup-move", dest="setup_move", action="store_false", default=S,
                   help="CSV FENs already have the solver to move")
    p.add_argument("--weak-threshold", type=float, default=S)
    p.add_argument("--strong-threshold", type=float, default=S)
    p.add_argument("--opponent-threshold", type=float, default=S)

    p = sub.add_parser("find-corruptions", help="search a corrupted board per puzzle")
    common(p), models(p, weak=True), dataset(p)
    p.add_argument("--strong-max-prob", type=float, default=S)
    p.add_argument("--weak-max-drop", type=float, default=S)
    p.add_argument("--value-max-gain", type=float, default=S)
    p.add_argument("--filters", default=S, help="subset of 'abc' to enable")

    for name, help_ in (("patch-residual", "residual-stream patching sweep"),
                        ("patch-heads", "per-head output patching sweep")):
        p = sub.add_parser(name, help=help_)
        common(p), models(p), dataset(p)

    p = sub.add_parser("ablate-l12h12", help="single attention-entry ablation (query t1, key t3)")
    common(p), models(p), dataset(p), mode(p)
    p.add_argument("--layer", type=int, default=S, help="1-based layer")
    p.add_argument("--head", type=int, default=S, help="1-based head")
    p.add_argument("--effect-threshold", type=float, default=S)

    p = sub.add_parser("detect-heads", help="tag knight/bishop/rook movement heads")
    common(p), models(p), dataset(p)
    p.add_argument("--head-threshold", type=float, default=S)
    p.add_argument("--head-sample", type=int, default=S, help="number of boards to score")
    p.add_argument("--calibrate", action="store_true", default=S, help="fit the threshold to 22/27/29 tags")

    p = sub.add_parser("ablate-piece-heads", help="targeted ablation in piece-movement heads")
    common(p), models(p), dataset(p), mode(p)
    p.add_argument("--tags", default=S, help="tags.json from detect-heads")
    p.add_argument("--effect-threshold", type=float, default=S)

    for name in ("train-probes", "eval-probes"):
        p = sub.add_parser(name, help="bilinear third-move probes" if name == "train-probes"
                           else "evaluate saved probes")
        common(p), models(p), dataset(p)
        if name == "train-probes":
            p.add_argument("--layers", default=S, help="comma-separated 1-based layers (default all)")
            p.add_argument("--probe-rank", type=int, default=S)
            p.add_argument("--probe-lr", type=float, default=S)
            p.add_argument("--probe-batch-size", type=int, default=S)
            p.add_argument("--probe-epochs", type=int, default=S)
            p.add_argument("--probe-seeds", type=int, default=S)
            p.add_argument("--train-fraction", type=float, default=S)
            p.add_argument("--random-baseline", action="store_true", default=S)
        else:
            p.add_argument("--probes", default=S, help="train-probes output directory")
            p.add_argument("--qk-head", default=S, help="'layer,head' (1-based) attention-score baseline")

    p = sub.add_parser("subsplit-report", help="re-aggregate experiment runs by same/different target")
    common(p), dataset(p)
    p.add_argument("--runs", nargs="+", default=S, help="experiment output directories")

    p = sub.add_parser("selfcheck", help="desk-scale invariant suite on synthetic models")
    common(p)

    p = sub.add_parser("make-fixture", help="write the planted model, a weak model and fixture puzzles")
    common(p)
    p.add_argument("--n", type=int, default=S, help="number of fixture puzzles")

    p = sub.add_parser("trace", help="evaluate one FEN and dump its trace")
    common(p), models(p)
    p.add_argument("--fen", default=S)
    return ap


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must be a mapping")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    cfg.update({k: v for k, v in vars(args).items() if k not in ("command", "verbose")})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        with Run(args.command, cfg, Path(cfg["out"])) as run:
            status = COMMANDS[args.command](cfg, run)
            if status:
                run.extra["exit_status"] = status
        return status
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RUN_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
