"""Two-phase experiment pipeline: categorize -> train -> evaluate, and the method matrix.

Layout of an output directory::

    <out>/categories/seed<S>/{config.json, dataset_manifest.json, ledger.csv, categories.json}
    <out>/runs/<tag>/seed<S>/{config.json, dataset_manifest.json, checkpoint.bin, train_log.jsonl,
                              report_id.json, report_ood.json, reliability_*.csv, ...}
    <out>/matrix/{matrix.csv, matrix.json}

Every artifact carries the config hash and the seed it was produced from.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import CalibrationReport, PredictionSet, ece, fit_temperature
from .config import RunConfig
from .data import DatasetBundle
from .dynamics import Categorization, MarginLedger, categorize, random_split
from .errors import CheckpointError, ManifestError
from .mixup import Ablation, MixupConfig, Strategy, fit
from .model import Classifier, load_checkpoint, save_checkpoint
from .training import TrainingData, predict_logits

log = logging.getLogger(__name__)

WORKERS_ENV = "AUMIX_WORKERS"

# (row name, strategy, label smoothing on) in table order
MATRIX_METHODS = (
    ("vanilla", Strategy.NONE, False),
    ("vanilla+LS", Strategy.NONE, True),
    ("Mixup", Strategy.INPUT_MIXUP, False),
    ("Mixup+LS", Strategy.INPUT_MIXUP, True),
    ("M-Mixup", Strategy.MANIFOLD_MIXUP, False),
    ("M-Mixup+LS", Strategy.MANIFOLD_MIXUP, True),
    ("Ours", Strategy.PROPOSED, False),
    ("Ours+LS", Strategy.PROPOSED, True),
)
MATRIX_CELLS = tuple((ts, split) for ts in ("no_ts", "ts") for split in ("id", "ood"))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _provenance(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": int(seed)}


def run_tag(cfg: RunConfig) -> str:
    tag = cfg.strategy.value
    if cfg.strategy is Strategy.PROPOSED and cfg.ablation is not Ablation.FULL:
        tag += "-" + cfg.ablation.value
    if cfg.label_smoothing is not None:
        tag += f"-ls{cfg.label_smoothing:g}"
    return tag


def categories_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out) / "categories" / f"seed{seed}"


def run_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out) / "runs" / run_tag(cfg) / f"seed{seed}"


def _prepare_dir(cfg: RunConfig, seed: int, path: Path, bundle: DatasetBundle) -> None:
    path.mkdir(parents=True, exist_ok=True)
    _write_json(path / "config.json", {**cfg.to_dict(), **_provenance(cfg, seed)})
    _write_json(path / "dataset_manifest.json", {**bundle.manifest(), **_provenance(cfg, seed)})


# ---------------------------------------------------------------------------
# phase 1


def categorize_run(cfg: RunConfig, seed: int, bundle: DatasetBundle | None = None) -> tuple[Categorization, Path]:
    """Plain training with margin recording, then the median AUM split.

    Phase 1 always trains on one-hot targets; label smoothing and the mixup
    settings only apply to phase 2.
    """
    bundle = bundle or cfg.load_bundle(seed)
    out = categories_dir(cfg, seed)
    _prepare_dir(cfg, seed, out, bundle)
    model = Classifier(cfg.model_config(bundle.num_classes, seed))
    data = TrainingData(model, bundle.train)
    ledger = MarginLedger(data.ids)
    fit(model, data, cfg.train_config(), MixupConfig(), seed, ledger=ledger)
    cats = categorize(ledger.compute_aum())
    ledger.write_csv(out / "ledger.csv", cats, _provenance(cfg, seed))
    manifest = {
        **_provenance(cfg, seed),
        "phase1_hash": cfg.phase1_hash(),
        "epochs": ledger.epochs,
        "n_train": len(data),
        **cats.to_dict(),
    }
    _write_json(out / "categories.json", manifest)
    log.info("seed %d: %d HIGH / %d LOW (threshold %.4g)", seed, len(cats.high), len(cats.low), cats.threshold)
    return cats, out / "categories.json"


def load_categories(cfg: RunConfig, seed: int, path=None) -> Categorization:
    path = Path(path) if path else categories_dir(cfg, seed) / "categories.json"
    if not path.exists():
        raise ManifestError(f"category manifest {path} not found; run `aumix categorize` first or pass --inline")
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("phase1_hash") != cfg.phase1_hash() or d.get("seed") != seed:
        raise ManifestError(f"category manifest {path} was produced by a different dataset/model/training "
                            f"config or seed")
    return Categorization.from_dict(d)


def no_aum_split(ids, seed: int) -> Categorization:
    return random_split(ids, np.random.default_rng(np.random.SeedSequence([seed, 0xA0A])))


# ---------------------------------------------------------------------------
# phase 2


def train_run(cfg: RunConfig, seed: int, inline: bool = False, manifest=None,
              bundle: DatasetBundle | None = None) -> Path:
    """Train one model with the configured strategy; returns the checkpoint path."""
    bundle = bundle or cfg.load_bundle(seed)
    mix = cfg.mixup_config()
    out = run_dir(cfg, seed)
    cats = None
    # resolve the categorization before any training so a missing manifest fails fast
    if mix.strategy is Strategy.PROPOSED and mix.ablation is not Ablation.NO_AUM:
        try:
            cats = load_categories(cfg, seed, manifest)
        except ManifestError:
            if not inline:
                raise
            cats, _ = categorize_run(cfg, seed, bundle)
    _prepare_dir(cfg, seed, out, bundle)
    model = Classifier(cfg.model_config(bundle.num_classes, seed))
    data = TrainingData(model, bundle.train, cfg.label_smoothing)
    if mix.strategy is Strategy.PROPOSED and mix.ablation is Ablation.NO_AUM:
        cats = no_aum_split(data.ids, seed)
    prov = _provenance(cfg, seed)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        def on_epoch(stats):
            fh.write(json.dumps({**prov, **stats.log_record()}, sort_keys=True) + "\n")

        fit(model, data, cfg.train_config(cfg.label_smoothing), mix, seed, categories=cats, on_epoch=on_epoch)
    meta = {**prov, "tag": run_tag(cfg), "strategy": mix.strategy.value, "ablation": mix.ablation.value,
            "label_smoothing": cfg.label_smoothing, "dataset": bundle.manifest()}
    return save_checkpoint(model, out / "checkpoint.bin", meta)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    reports: dict  # (ts, split) -> CalibrationReport
    temperature: float | None
    out: Path


def _report(logits, gold, n_bins, split, temperature, meta) -> CalibrationReport:
    rep = ece(PredictionSet.from_logits(logits, gold, temperature), n_bins, dataset=split)
    rep.meta.update(meta)
    return rep


def evaluate_run(cfg: RunConfig, checkpoint=None, seed: int | None = None,
                 bundle: DatasetBundle | None = None, temperature_scaling: bool | None = None) -> Evaluation:
    """ID / OOD calibration reports of a checkpoint, optionally with a dev-fitted temperature."""
    if checkpoint is None:
        if seed is None:
            raise ValueError("either a checkpoint or a seed is required")
        checkpoint = run_dir(cfg, seed) / "checkpoint.bin"
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CheckpointError(f"checkpoint {checkpoint} not found")
    _, meta = load_checkpoint(checkpoint)
    seed = int(meta.get("seed", -1)) if seed is None else seed
    bundle = bundle or cfg.load_bundle(seed)
    if meta.get("dataset") != bundle.manifest():
        raise CheckpointError(f"{checkpoint}: checkpoint was trained on a different dataset")
    model, meta = load_checkpoint(checkpoint, expected=cfg.model_config(bundle.num_classes, seed))
    ts = cfg.temperature_scaling if temperature_scaling is None else temperature_scaling
    out = checkpoint.parent
    base_meta = {"config_hash": meta.get("config_hash"), "seed": seed, "tag": meta.get("tag")}

    def logits_of(samples):
        d = TrainingData(model, samples)
        return predict_logits(model, d), d.labels

    split_data = {"id": logits_of(bundle.test_id), "ood": logits_of(bundle.test_ood)}
    reports, temperature = {}, None
    if ts:
        dev_logits, dev_gold = logits_of(bundle.dev)
        temperature = fit_temperature(dev_logits, dev_gold, n_bins=cfg.n_bins)
    for split, (logits, gold) in split_data.items():
        reports[("no_ts", split)] = _report(logits, gold, cfg.n_bins, split, None, base_meta)
        if ts:
            reports[("ts", split)] = _report(logits, gold, cfg.n_bins, split, temperature, base_meta)
    for (mode, split), rep in reports.items():
        suffix = split if mode == "no_ts" else f"{split}_ts"
        _write_json(out / f"report_{suffix}.json", rep.to_dict())
        rep.write_reliability_csv(out / f"reliability_{suffix}.csv")
    return Evaluation(reports, temperature, out)


# ---------------------------------------------------------------------------
# matrix


def method_config(cfg: RunConfig, strategy: Strategy, ls: bool) -> RunConfig:
    sigma = (cfg.label_smoothing if cfg.label_smoothing is not None else cfg.matrix_sigma) if ls else None
    return cfg.replace(strategy=strategy.value, ablation=Ablation.FULL.value, label_smoothing=sigma,
                       temperature_scaling=True)


def _matrix_cell(cfg_dict: dict, method: str, seed: int) -> dict:
    cfg = RunConfig.from_dict(cfg_dict)
    name, strategy, ls = next(m for m in MATRIX_METHODS if m[0] == method)
    mcfg = method_config(cfg, strategy, ls)
    try:
        bundle = mcfg.load_bundle(seed)
        ckpt = train_run(mcfg, seed, bundle=bundle)
        ev = evaluate_run(mcfg, ckpt, seed, bundle=bundle)
        values = {f"{mode}_{split}": {"ece": rep.ece, "accuracy": rep.accuracy}
                  for (mode, split), rep in ev.reports.items()}
        return {"method": name, "seed": seed, "ok": True, "values": values, "temperature": ev.temperature}
    except Exception as exc:  # noqa: BLE001 - a failed cell is recorded and the matrix continues
        log.error("matrix cell %s seed %d failed: %s", name, seed, exc)
        return {"method": name, "seed": seed, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def _categorize_cell(cfg_dict: dict, seed: int) -> dict:
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        categorize_run(cfg, seed)
        return {"seed": seed, "ok": True}
    except Exception as exc:  # noqa: BLE001
        log.error("categorization for seed %d failed: %s", seed, exc)
        return {"seed": seed, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, args_list, workers: int):
    if workers <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def aggregate(cells: list[dict], seeds) -> list[dict]:
    """Mean and (population) standard deviation per method x TS x split."""
    rows = []
    for name, _, _ in MATRIX_METHODS:
        ok = [c for c in cells if c["method"] == name and c["ok"]]
        row = {"method": name, "n_runs": len(ok), "n_failed": sum(1 for c in cells if c["method"] == name and not c["ok"])}
        for mode, split in MATRIX_CELLS:
            for metric in ("ece", "accuracy"):
                vals = np.array([c["values"][f"{mode}_{split}"][metric] for c in ok], dtype=np.float64)
                key = f"{split}_{mode}_{metric}"
                row[f"{key}_mean"] = float(vals.mean()) if vals.size else None
                row[f"{key}_std"] = float(vals.std()) if vals.size else None
        rows.append(row)
    return rows


def matrix_run(cfg: RunConfig) -> tuple[list[dict], list[dict]]:
    """All 8 methods x seeds; returns (aggregated rows, failed cells)."""
    workers = n_workers()
    cfg_dict = cfg.to_dict()
    cat_results = _map(_categorize_cell, [(cfg_dict, s) for s in cfg.seeds], workers)
    cells = _map(_matrix_cell, [(cfg_dict, m[0], s) for s in cfg.seeds for m in MATRIX_METHODS], workers)
    rows = aggregate(cells, cfg.seeds)
    failures = [c for c in cat_results if not c["ok"]] + [c for c in cells if not c["ok"]]
    out = Path(cfg.out) / "matrix"
    out.mkdir(parents=True, exist_ok=True)
    columns = ["method", "n_runs", "n_failed"] + [
        f"{split}_{mode}_{metric}_{stat}"
        for mode, split in MATRIX_CELLS for metric in ("ece", "accuracy") for stat in ("mean", "std")
    ]
    with open(out / "matrix.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in columns})
    _write_json(out / "matrix.json", {
        "config_hash": cfg.config_hash(), "seeds": list(cfg.seeds),
        "rows": rows, "cells": [{k: v for k, v in c.items() if k != "traceback"} for c in cells],
        "failures": [{k: v for k, v in c.items() if k != "traceback"} for c in failures],
    })
    return rows, failures


def format_matrix(rows: list[dict]) -> str:
    """Plain-text table: ECE (x100) mean_std per method for ID/OOD x No TS/TS."""
    head = f"{'method':<12}" + "".join(f"{split.upper() + ' ' + ('TS' if mode == 'ts' else 'No TS'):>18}"
                                       for mode, split in MATRIX_CELLS)
    lines = [head]
    for r in rows:
        cells = []
        for mode, split in MATRIX_CELLS:
            m, s = r[f"{split}_{mode}_ece_mean"], r[f"{split}_{mode}_ece_std"]
            cells.append(f"{'n/a':>18}" if m is None else f"{100 * m:>12.2f} ±{100 * s:<4.2f}")
        lines.append(f"{r['method']:<12}" + "".join(cells))
    return "\n".join(lines)
