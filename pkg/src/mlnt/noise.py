"""Label corruption and synthetic noisy-label generation.

Two separate jobs live here. ``inject_symmetric`` / ``inject_asymmetric``
corrupt a clean training set once, before training. ``topk_neighbors`` and
``generate_synthetic_labels`` run on every mini-batch and build the label
variants used by the meta step: a chosen sample takes the (noisy) label of one
of its nearest neighbours in a frozen feature space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, DimensionError, InputError
from .nn import MlpSpec, ParamSet, logits

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
# truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog
CIFAR10_ASYMMETRIC_MAP = {9: 1, 2: 0, 4: 7, 3: 5, 5: 3}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    ratio: float = 0.0
    class_map: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric"):
            raise InputError(f"noise kind must be 'symmetric' or 'asymmetric', got {self.kind!r}")
        _check_ratio(self.ratio)
        object.__setattr__(self, "class_map", {int(k): int(v) for k, v in dict(self.class_map).items()})

    def apply(self, labels: Sequence[int], n_classes: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "symmetric":
            return inject_symmetric(labels, n_classes, self.ratio, rng)
        for src, dst in self.class_map.items():
            if not (0 <= src < n_classes and 0 <= dst < n_classes):
                raise InputError(f"class map entry {src}->{dst} outside [0, {n_classes})")
        return inject_asymmetric(labels, self.class_map, self.ratio, rng)


def _check_ratio(r: float) -> None:
    if not 0.0 <= r <= 1.0:
        raise InputError(f"noise ratio must be in [0, 1], got {r}")


def inject_symmetric(labels: Sequence[int], n_classes: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``r`` replace each label by a uniform draw over all classes.

    The draw may hit the original class, so the expected fraction of changed
    labels is ``r * (1 - 1/n_classes)``.
    """
    _check_ratio(r)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    replace = rng.random(labels.size) < r
    random_labels = rng.integers(0, n_classes, size=labels.size)
    return np.where(replace, random_labels, labels)


def inject_asymmetric(labels: Sequence[int], class_map: Mapping[int, int], r: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Flip each label in ``class_map``'s domain to its mapped class with probability ``r``."""
    _check_ratio(r)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise InputError("labels must be non-negative")
    flip = rng.random(labels.size) < r
    out = labels.copy()
    for src, dst in class_map.items():
        hit = (labels == src) & flip
        out[hit] = dst
    return out


@dataclass
class FeatureIndex:
    """Per-sample feature vectors used to rank neighbours (one row per sample id)."""

    features: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids)
        if self.features.ndim != 2 or self.features.shape[0] != self.sample_ids.shape[0]:
            raise DimensionError("need exactly one feature row per sample id")
        if not np.isfinite(self.features).all():
            raise InputError("feature index contains non-finite entries")
        self._pos = {sid: i for i, sid in enumerate(self.sample_ids.tolist())}
        if len(self._pos) != len(self.sample_ids):
            raise InputError("sample ids must be unique")

    def positions(self, sample_ids: Sequence) -> np.ndarray:
        try:
            return np.array([self._pos[s] for s in np.asarray(sample_ids).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"sample id {exc.args[0]!r} is not in the feature index") from None

    def __len__(self) -> int:
        return self.features.shape[0]


def build_feature_index(X: np.ndarray, spec: MlpSpec, pretrained: ParamSet,
                        sample_ids: Sequence | None = None) -> FeatureIndex:
    """Index the pre-softmax outputs of ``pretrained`` for every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if sample_ids is None:
        sample_ids = np.arange(X.shape[0])
    return FeatureIndex(logits(spec, pretrained, X), np.asarray(sample_ids))


def neighbors_from_features(features: np.ndarray, order: np.ndarray, K: int = 10) -> np.ndarray:
    """Batch-local indices of the ``K`` nearest other rows of ``features``.

    ``order`` gives each row's global index; distance ties go to the smaller one.
    Returns an array of shape ``(k, min(K, k - 1))``.
    """
    k = features.shape[0]
    n_keep = min(K, k - 1)
    if n_keep <= 0:
        return np.empty((k, 0), dtype=np.int64)
    diff = features[:, None, :] - features[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    # stable sort by global index first, then by distance: equal distances keep index order
    by_index = np.argsort(order, kind="stable")
    ranked = by_index[np.argsort(d2[:, by_index], axis=1, kind="stable")]
    return ranked[:, :n_keep]


def topk_neighbors(index: FeatureIndex, batch_ids: Sequence, K: int = 10) -> np.ndarray:
    """Nearest neighbours of each batch member among the other batch members.

    Distances are Euclidean in ``index`` feature space. Rows of the result hold
    batch positions (0..k-1), closest first.
    """
    pos = index.positions(batch_ids)
    return neighbors_from_features(index.features[pos], pos, K)


@dataclass
class SyntheticLabelSet:
    """Several relabelled copies of a mini-batch's one-hot labels."""

    variants: np.ndarray  # (n_variants, k, c)
    replaced_indices: np.ndarray  # (n_variants, n_relabel) batch positions that were relabelled
    chosen_neighbors: np.ndarray  # (n_variants, n_relabel) neighbour whose label was copied

    def __len__(self) -> int:
        return self.variants.shape[0]

    def __iter__(self):
        return iter(self.variants)


def generate_synthetic_labels(Y: np.ndarray, neighbors: np.ndarray, n_relabel: int, n_variants: int,
                              rng: np.random.Generator) -> SyntheticLabelSet:
    """Random neighbour label transfer, repeated ``n_variants`` times.

    For each variant ``n_relabel`` distinct batch positions are drawn; each takes the
    original label (from ``Y``) of a uniformly chosen entry of its neighbour list.
    """
    Y = np.asarray(Y, dtype=np.float64)
    k = Y.shape[0]
    if not 0 <= n_relabel <= k:
        raise InputError(f"n_relabel must be in [0, {k}], got {n_relabel}")
    if n_variants < 0:
        raise InputError("n_variants must be non-negative")
    neighbors = np.asarray(neighbors, dtype=np.int64).reshape(k, -1)
    if n_relabel > 0 and neighbors.shape[1] == 0:
        raise ConfigError("cannot transfer labels: the batch has no neighbours (batch size 1)")
    n_nb = neighbors.shape[1]
    variants = np.broadcast_to(Y, (n_variants, *Y.shape)).copy()
    replaced = np.empty((n_variants, n_relabel), dtype=np.int64)
    chosen = np.empty((n_variants, n_relabel), dtype=np.int64)
    for m in range(n_variants):
        sel = rng.choice(k, size=n_relabel, replace=False)
        nb = neighbors[sel, rng.integers(0, n_nb, size=n_relabel)] if n_relabel else sel
        variants[m, sel] = Y[nb]
        replaced[m] = sel
        chosen[m] = nb
    return SyntheticLabelSet(variants, replaced, chosen)
