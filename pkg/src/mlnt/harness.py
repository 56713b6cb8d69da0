"""Experiment runner: data, noise, feature pre-training, iterative training, reports.

Output layout under ``output_dir``::

    summary.json
    seed-<s>/noisy_labels.csv
    seed-<s>/metrics.csv            one row per epoch, iteration 0 is the CE pre-training run
    seed-<s>/checkpoints/pretrain.ckpt
    seed-<s>/checkpoints/iter<i>-{best,student,teacher}.ckpt

A sweep writes one such tree per swept value in ``<axis>=<value>/`` plus an
aggregate ``sweep.csv`` and ``sweep_summary.json``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, _axis_value, config_to_dict
from .data import (
    Checkpoint, Dataset, append_metrics, load_dataset, make_synthetic_benchmark, read_noisy_labels,
    save_checkpoint, save_dataset, write_noisy_labels,
)
from .exceptions import ConfigError, DimensionError, InputError
from .nn import predict_proba
from .noise import FeatureIndex, build_feature_index
from .random_streams import RandomStreams
from .training import (
    IterationResult, IterativeResult, accuracy, pretrain_feature_extractor, run_iterative_training,
)

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["axis", "value", "seed", "iteration", "filtered_count", "best_role", "best_epoch",
                 "best_val_acc", "test_acc_best", "test_acc_student", "test_acc_teacher"]


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    n: int
    confusion: np.ndarray  # rows: true class, columns: predicted class

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "n": self.n, "confusion": self.confusion.tolist()}


def evaluate(checkpoint: Checkpoint, dataset: Dataset) -> EvalReport:
    """Top-1 accuracy of ``argmax`` predictions against ``dataset.labels``, plus confusion counts."""
    spec = checkpoint.spec
    if dataset.n_features != spec.n_inputs:
        raise DimensionError(f"checkpoint expects {spec.n_inputs} features, dataset has {dataset.n_features}")
    if dataset.n_classes > spec.n_classes:
        raise DimensionError(f"dataset has {dataset.n_classes} classes, checkpoint predicts {spec.n_classes}")
    c = spec.n_classes
    if len(dataset) == 0:
        return EvalReport(float("nan"), 0, np.zeros((c, c), dtype=np.int64))
    pred = np.argmax(predict_proba(spec, checkpoint.params, dataset.features), axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    return EvalReport(float(np.mean(pred == dataset.labels)), len(dataset), confusion)


# -- data preparation ------------------------------------------------------------------

@dataclass
class PreparedData:
    train: Dataset  # observed (possibly corrupted) labels; clean ones in clean_labels
    val: Dataset
    test: Dataset | None


def load_clean_splits(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset, Dataset | None]:
    if cfg.data.benchmark is not None:
        return make_synthetic_benchmark(cfg.data.benchmark.spec_for(seed))
    files = cfg.data.files
    c = files.n_classes
    train = load_dataset(files.train, c, split="train")
    val = load_dataset(files.val, c, split="val") if files.val else None
    test = load_dataset(files.test, c, split="test") if files.test else None
    if c is None:
        c = max(d.n_classes for d in (train, val, test) if d is not None)
        train, val, test = (None if d is None else Dataset(d.features, d.labels, c, d.ids, d.split)
                            for d in (train, val, test))
    if files.noisy_labels is not None:
        ids, _, noisy = read_noisy_labels(files.noisy_labels)
        lookup = dict(zip(ids.tolist(), noisy.tolist()))
        missing = [i for i in train.ids.tolist() if i not in lookup]
        if missing:
            raise InputError(f"{files.noisy_labels}: no noisy label for sample id {missing[0]!r}")
        train = train.with_labels([lookup[i] for i in train.ids.tolist()])
    if val is None:
        order = RandomStreams(seed).get("split").permutation(len(train))
        n_val = int(np.floor(files.val_fraction * len(train)))
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        # validation keeps the clean labels when they are known
        v = train.subset(val_idx)
        labels = v.labels if v.clean_labels is None else v.clean_labels
        val = Dataset(v.features, labels, c, v.ids, "val")
        train = train.subset(train_idx)
    return train, val, test


def prepare_data(cfg: ExperimentConfig, seed: int) -> PreparedData:
    """Clean splits, then label noise on the training split only."""
    train, val, test = load_clean_splits(cfg, seed)
    noise = cfg.noise.to_spec()
    if noise is not None:
        if cfg.data.files is not None and cfg.data.files.noisy_labels is not None:
            raise ConfigError("data.files.noisy_labels is set: use noise.kind 'none' to avoid corrupting twice")
        train = train.with_labels(noise.apply(train.labels, train.n_classes, RandomStreams(seed).get("noise")))
    return PreparedData(train, val, test)


# -- single seed ----------------------------------------------------------------------

@dataclass
class SeedCache:
    """Work shared by runs that differ only in a sweep axis."""
    data: PreparedData
    pretrain: IterationResult
    features: FeatureIndex
    first: IterationResult | None = None


def _seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed-{seed}"
    (d / "checkpoints").mkdir(parents=True, exist_ok=True)
    return d


def pretrain_seed(cfg: ExperimentConfig, seed: int, data: PreparedData | None = None) -> SeedCache:
    data = data or prepare_data(cfg, seed)
    spec = cfg.model.spec(data.train.n_features, data.train.n_classes)
    hyper = cfg.mlnt_hyper()
    pre = pretrain_feature_extractor(data.train, data.val, spec, hyper, RandomStreams(seed), cfg.pretrain_epochs)
    index = build_feature_index(data.train.features, spec, pre.student.params, data.train.ids)
    return SeedCache(data, pre, index)


def last_half_std(values: Sequence[float]) -> float:
    """Population standard deviation over the second half of an epoch series."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.std(values[len(values) // 2:]))


def _test_acc(ckpt: Checkpoint, test: Dataset | None):
    return None if test is None else accuracy(ckpt.spec, ckpt.params, test)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, cache: SeedCache | None = None) -> dict:
    """Full protocol for one seed; returns its summary record."""
    cache = cache or pretrain_seed(cfg, seed)
    data = cache.data
    spec = cfg.model.spec(data.train.n_features, data.train.n_classes)
    hyper = cfg.mlnt_hyper()
    sdir = _seed_dir(out, seed)
    clean = data.train.clean_labels
    write_noisy_labels(sdir / "noisy_labels.csv", data.train.ids,
                       clean if clean is not None else data.train.labels, data.train.labels)
    metrics_path = sdir / "metrics.csv"
    metrics_path.write_text("")
    for row in cache.pretrain.metrics:
        append_metrics(row, metrics_path)
    save_checkpoint(cache.pretrain.student, sdir / "checkpoints" / "pretrain.ckpt")

    first = cache.first
    if first is not None:
        for row in first.metrics:
            append_metrics(row, metrics_path)

    def store(it: int, res: IterationResult) -> None:
        for role in ("best", "student", "teacher"):
            save_checkpoint(getattr(res, role), sdir / "checkpoints" / f"iter{it}-{role}.ckpt")

    result: IterativeResult = run_iterative_training(
        cfg.iteration_plan(), data.train, data.val, spec, hyper, cache.features, RandomStreams(seed),
        meta_mode=cfg.meta_mode, metrics_path=metrics_path, on_iteration=store, first=first,
    )
    pre = cache.pretrain
    record = {
        "seed": seed,
        "n_train": len(data.train),
        "n_val": len(data.val),
        "label_noise_rate": None if clean is None else float(np.mean(clean != data.train.labels)),
        "baseline": {
            "best_val_acc": max(m.val_acc_student for m in pre.metrics),
            "final_val_acc": pre.metrics[-1].val_acc_student,
            "test_acc_final": _test_acc(pre.student, data.test),
            "val_std_last_half": last_half_std([m.val_acc_student for m in pre.metrics]),
        },
        "iterations": [],
    }
    for i, res in enumerate(result.iterations, start=1):
        record["iterations"].append({
            "iteration": i,
            "filtered_count": res.filtered_count,
            "best_role": res.best.role,
            "best_epoch": res.best.epoch,
            "best_val_acc": res.best.val_accuracy,
            "test_acc_best": _test_acc(res.best, data.test),
            "test_acc_student": _test_acc(res.student, data.test),
            "test_acc_teacher": _test_acc(res.teacher, data.test),
            "val_std_student_last_half": last_half_std([m.val_acc_student for m in res.metrics]),
            "val_std_teacher_last_half": last_half_std([m.val_acc_teacher for m in res.metrics]),
        })
    cache.first = result.iterations[0]
    return record


def _mean(records: list[dict], getter) -> float | None:
    vals = [getter(r) for r in records]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def _aggregate(records: list[dict]) -> dict:
    n_it = len(records[0]["iterations"])
    agg = {"baseline_test_acc": _mean(records, lambda r: r["baseline"]["test_acc_final"]), "iterations": []}
    for i in range(n_it):
        agg["iterations"].append({
            key: _mean(records, lambda r, key=key: r["iterations"][i][key])
            for key in ("best_val_acc", "test_acc_best", "test_acc_student", "test_acc_teacher", "filtered_count")
        })
    return agg


def _summary_config(cfg: ExperimentConfig) -> dict:
    # output_dir is left out so the report depends only on what was computed
    d = config_to_dict(cfg)
    d.pop("output_dir")
    return d


def write_json(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_experiment(cfg: ExperimentConfig, caches: dict[int, SeedCache] | None = None) -> dict:
    """Run every seed and write ``summary.json``; returns the summary."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in cfg.seeds():
        logger.info("seed %d", seed)
        cache = None if caches is None else caches.get(seed)
        records.append(run_seed(cfg, seed, out, cache))
    summary = {"config": _summary_config(cfg), "seeds": records, "mean": _aggregate(records)}
    write_json(summary, out / "summary.json")
    return summary


def _value_label(axis: str, value) -> str:
    return f"{axis}={value:g}" if isinstance(value, float) else f"{axis}={value}"


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    """One full experiment per swept value, sharing data and pre-training across values.

    When the filter threshold is swept, iteration 1 does not depend on it and
    is trained once per seed.
    """
    if cfg.sweep is None:
        raise ConfigError("config has no sweep section")
    axis = cfg.sweep.axis
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    caches: dict[int, SeedCache] = {}
    rows, summaries = [], {}
    for raw in cfg.sweep.values:
        value = _axis_value(axis, raw)
        label = _value_label(axis, value)
        sub = cfg.with_hyper(**{axis: value}).model_copy(update={"output_dir": out / label, "sweep": None})
        for seed in sub.seeds():
            if seed not in caches:
                caches[seed] = pretrain_seed(sub, seed)
            elif axis != "filter_threshold":
                caches[seed].first = None
        summary = run_experiment(sub, caches)
        summaries[label] = summary
        for rec in summary["seeds"]:
            for it in rec["iterations"]:
                rows.append({"axis": axis, "value": value, "seed": rec["seed"],
                             **{k: it[k] for k in SWEEP_COLUMNS[3:]}})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    write_json({"axis": axis, "values": [_axis_value(axis, v) for v in cfg.sweep.values],
                "mean": {label: s["mean"] for label, s in summaries.items()}}, out / "sweep_summary.json")
    return rows


def export_noisy_data(cfg: ExperimentConfig, seed: int) -> Path:
    """Write the clean splits and the corrupted training labels for one seed."""
    data = prepare_data(cfg, seed)
    sdir = _seed_dir(Path(cfg.output_dir), seed)
    clean = data.train.clean_labels if data.train.clean_labels is not None else data.train.labels
    save_dataset(Dataset(data.train.features, clean, data.train.n_classes, data.train.ids), sdir / "train.csv")
    save_dataset(data.val, sdir / "val.csv")
    if data.test is not None:
        save_dataset(data.test, sdir / "test.csv")
    write_noisy_labels(sdir / "noisy_labels.csv", data.train.ids, clean, data.train.labels)
    return sdir


def export_features(cfg: ExperimentConfig, seed: int) -> Path:
    """Pre-train the feature network for one seed; write its checkpoint and the feature rows."""
    cache = pretrain_seed(cfg, seed)
    sdir = _seed_dir(Path(cfg.output_dir), seed)
    save_checkpoint(cache.pretrain.student, sdir / "checkpoints" / "pretrain.ckpt")
    train = cache.data.train
    save_dataset(Dataset(cache.features.features, train.labels, train.n_classes, train.ids), sdir / "features.csv")
    return sdir
