"""Datasets, desk-scale benchmarks, checkpoints and the metrics log."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DimensionError, FormatError, InputError
from .nn import MlpSpec, ParamSet

SPLITS = ("train", "val", "test")
GENERATORS = ("gaussian_blobs", "concentric_rings", "image_patches")


@dataclass
class Dataset:
    """Feature rows with observed labels.

    ``clean_labels`` is kept only for evaluation and reporting; training code
    must read ``labels``.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    ids: np.ndarray = None
    split: str = "train"
    clean_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.ids is None:
            self.ids = np.arange(n)
        self.ids = np.asarray(self.ids).ravel()
        if self.labels.shape[0] != n or self.ids.shape[0] != n:
            raise DimensionError(f"{n} feature rows but {self.labels.shape[0]} labels / {self.ids.shape[0]} ids")
        if self.n_classes < 1:
            raise InputError("n_classes must be positive")
        _check_range(self.labels, self.n_classes)
        if self.clean_labels is not None:
            self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64).ravel()
            if self.clean_labels.shape[0] != n:
                raise DimensionError("clean_labels length differs from features")
            _check_range(self.clean_labels, self.n_classes)
        if len(set(self.ids.tolist())) != n:
            raise InputError("sample ids must be unique")
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}")
        if not np.isfinite(self.features).all():
            raise InputError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        clean = None if self.clean_labels is None else self.clean_labels[idx]
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.ids[idx], self.split, clean)

    def with_labels(self, labels: Sequence[int]) -> "Dataset":
        """Copy with new observed labels; the current labels become ``clean_labels`` if unset."""
        clean = self.labels if self.clean_labels is None else self.clean_labels
        return replace(self, labels=np.asarray(labels), clean_labels=clean)


def _check_range(labels: np.ndarray, c: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise InputError(f"label {bad} outside [0, {c})")


# -- CSV datasets -------------------------------------------------------------

def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write ``id,label,f0..f{d-1}``; floats are written with ``repr`` so they round-trip."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", *(f"f{j}" for j in range(dataset.n_features))])
        for sid, y, row in zip(dataset.ids.tolist(), dataset.labels.tolist(), dataset.features):
            w.writerow([sid, y, *(repr(float(v)) for v in row)])


def load_dataset(path: str | os.PathLike, n_classes: int | None = None, fmt: str = "csv",
                 split: str = "train") -> Dataset:
    """Read a dataset written by :func:`save_dataset`.

    ``n_classes`` defaults to ``max(label) + 1``.
    """
    if fmt != "csv":
        raise InputError(f"unsupported dataset format {fmt!r}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if header[:2] != ["id", "label"] or any(h != f"f{j}" for j, h in enumerate(header[2:])):
        raise FormatError(f"{path}: header must be id,label,f0..f(d-1), got {header}")
    d = len(header) - 2
    ids, labels, feats = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 2:
            raise FormatError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
        try:
            labels.append(int(row[1]))
            feats.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        ids.append(_parse_id(row[0]))
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate sample id")
    return Dataset(np.asarray(feats, dtype=np.float64).reshape(len(ids), d), labels, n_classes,
                   np.asarray(ids), split)


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def write_noisy_labels(path: str | os.PathLike, ids, original, noisy) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "original_label", "noisy_label"])
        for row in zip(np.asarray(ids).tolist(), np.asarray(original).tolist(), np.asarray(noisy).tolist()):
            w.writerow(row)


def read_noisy_labels(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["sample_id", "original_label", "noisy_label"]:
        raise FormatError(f"{path}: bad noisy-label header")
    body = rows[1:]
    return (np.asarray([_parse_id(r[0]) for r in body]),
            np.asarray([int(r[1]) for r in body], dtype=np.int64),
            np.asarray([int(r[2]) for r in body], dtype=np.int64))


# -- synthetic benchmarks -----------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSpec:
    """Recipe for a desk-scale classification benchmark.

    ``n_train`` is the pool that gets split into train/val (10% val).
    ``separation`` is in units of the within-class standard deviation.
    """

    generator: str = "gaussian_blobs"
    n_train: int = 4000
    n_test: int = 2000
    n_features: int = 10
    n_classes: int = 4
    separation: float = 3.0
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InputError(f"generator must be one of {GENERATORS}")
        if self.n_classes < 2:
            raise InputError("need at least 2 classes")
        if self.separation <= 0:
            raise InputError("separation must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InputError("val_fraction must be in [0, 1)")
        if self.n_train < 2 or self.n_test < 1 or self.n_features < 1:
            raise InputError("benchmark sizes must be positive")


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _gaussian_blobs(spec: BenchmarkSpec, rng: np.random.Generator):
    # centres on a simplex-like layout scaled so the closest pair sits `separation` apart
    raw = rng.normal(size=(spec.n_classes, spec.n_features))
    dists = np.linalg.norm(raw[:, None] - raw[None, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    centres = raw * (spec.separation / dists.min())

    def draw(n):
        y = _balanced_labels(n, spec.n_classes, rng)
        return centres[y] + rng.normal(size=(n, spec.n_features)), y

    return draw


def _concentric_rings(spec: BenchmarkSpec, rng: np.random.Generator):
    def draw(n):
        y = _balanced_labels(n, spec.n_classes, rng)
        radius = (y + 1) * spec.separation + rng.normal(size=n)
        direction = rng.normal(size=(n, spec.n_features))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        return direction * radius[:, None], y

    return draw


def _image_patches(spec: BenchmarkSpec, rng: np.random.Generator):
    from sklearn.datasets import load_digits

    digits = load_digits()
    keep = digits.target < spec.n_classes
    X_all = digits.data[keep] / 16.0
    y_all = digits.target[keep]
    # pixel noise scaled down as separation grows; keeps the knob meaningful
    noise_scale = 1.0 / spec.separation

    def draw(n):
        pick = rng.integers(0, X_all.shape[0], size=n)
        X = X_all[pick] + noise_scale * rng.normal(size=(n, X_all.shape[1]))
        return X[:, : spec.n_features] if spec.n_features < X.shape[1] else X, y_all[pick]

    return draw


def make_synthetic_benchmark(spec: BenchmarkSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/val/test splits; ``val`` is ``floor(val_fraction * n_train)`` rows of the pool."""
    rng = np.random.default_rng(spec.seed)
    draw = {"gaussian_blobs": _gaussian_blobs, "concentric_rings": _concentric_rings,
            "image_patches": _image_patches}[spec.generator](spec, rng)
    X_pool, y_pool = draw(spec.n_train)
    X_test, y_test = draw(spec.n_test)
    n_val = int(np.floor(spec.val_fraction * spec.n_train))
    order = rng.permutation(spec.n_train)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    ids = np.arange(spec.n_train)
    train = Dataset(X_pool[train_idx], y_pool[train_idx], spec.n_classes, ids[train_idx], "train",
                    y_pool[train_idx])
    val = Dataset(X_pool[val_idx], y_pool[val_idx], spec.n_classes, ids[val_idx], "val", y_pool[val_idx])
    test = Dataset(X_test, y_test, spec.n_classes, spec.n_train + np.arange(spec.n_test), "test", y_test)
    return train, val, test


# -- checkpoints ----------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"MLNTCKPT"
#   uint32    format version
#   uint32    header length H
#   H bytes   UTF-8 JSON header: spec, epoch, role, val_accuracy, n_params
#   n_params  float64 little-endian, layer order W_1 (row-major), b_1, W_2, b_2, ...

CHECKPOINT_MAGIC = b"MLNTCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: MlpSpec
    params: ParamSet
    epoch: int = 0
    role: str = "student"
    val_accuracy: float = float("nan")
    format_version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        self.params.check(self.spec)

    @property
    def flat_params(self) -> np.ndarray:
        return self.params.flat()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    flat = ckpt.flat_params.astype("<f8")
    header = json.dumps({
        "spec": ckpt.spec.to_dict(),
        "epoch": int(ckpt.epoch),
        "role": ckpt.role,
        "val_accuracy": float(ckpt.val_accuracy),
        "n_params": int(flat.size),
    }, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + flat.tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 16 + hlen:
        raise FormatError(f"{path}: length mismatch (truncated header)")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    spec = MlpSpec.from_dict(header["spec"])
    body = data[16 + hlen:]
    n = header["n_params"]
    if n != spec.n_params or len(body) != 8 * n:
        raise FormatError(f"{path}: length mismatch: expected {spec.n_params} float64 values, "
                          f"found {len(body) / 8:g}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return Checkpoint(spec, ParamSet.from_flat(spec, flat), header["epoch"], header["role"],
                      header["val_accuracy"], version)


# -- metrics log ------------------------------------------------------------------

@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    step_lr: float
    eta: float
    gamma: float
    lambda_: float
    train_acc_noisy: float
    val_acc_student: float
    val_acc_teacher: float
    ce_loss: float
    meta_loss: float
    filtered_count: int

    def values(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


METRICS_COLUMNS = ["iteration", "epoch", "step_lr", "eta", "gamma", "lambda", "train_acc_noisy",
                   "val_acc_student", "val_acc_teacher", "ce_loss", "meta_loss", "filtered_count"]


def append_metrics(row: MetricsRow | Sequence, path: str | os.PathLike) -> None:
    """Append one row, writing the header first if the file is empty or missing."""
    values = row.values() if isinstance(row, MetricsRow) else list(row)
    if len(values) != len(METRICS_COLUMNS):
        raise FormatError(f"metrics row has {len(values)} columns, expected {len(METRICS_COLUMNS)}")
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header != METRICS_COLUMNS:
            raise FormatError(f"{path}: existing header {header} does not match metrics schema")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if fresh:
        w.writerow(METRICS_COLUMNS)
    w.writerow([repr(v) if isinstance(v, float) else v for v in values])
    # one write call so the line lands whole
    with open(path, "a", newline="") as fh:
        fh.write(buf.getvalue())


def read_metrics(path: str | os.PathLike) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_COLUMNS:
            raise FormatError(f"{path}: bad metrics header {header}")
        rows = []
        for rec in reader:
            if len(rec) != len(METRICS_COLUMNS):
                raise FormatError(f"{path}: row with {len(rec)} columns")
            rows.append(MetricsRow(int(rec[0]), int(rec[1]), *(float(v) for v in rec[2:11]), int(rec[11])))
    return rows
