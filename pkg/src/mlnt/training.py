"""Noise-tolerant training with a meta step on synthetic noisy labels.

One training step on a mini-batch ``(X, Y)``:

1. build ``n_synthetic`` relabelled copies of ``Y`` by neighbour label transfer;
2. for each copy take one plain SGD step (size ``inner_lr``) from ``theta``;
3. score every stepped model by KL against the consistency target (the EMA
   teacher, or a teacher/mentor blend in later iterations) and move ``theta``
   down the averaged gradient with rate ``meta_lr``;
4. ordinary cross-entropy step with momentum SGD at rate ``lr``;
5. EMA update of the teacher.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Checkpoint, Dataset, MetricsRow, append_metrics
from .exceptions import ConfigError, InputError, NumericError
from .nn import (
    GradSet, MlpSpec, MomentumState, ParamSet, backward_ce, backward_kl, finite_diff_grad,
    forward, kl_divergence, momentum_step, one_hot, predict_proba, sgd_step,
)
from .noise import FeatureIndex, SyntheticLabelSet, generate_synthetic_labels, neighbors_from_features
from .random_streams import RandomStreams

logger = logging.getLogger(__name__)

META_MODES = ("first_order", "full_fd")


@dataclass
class MlntHyper:
    """Every scalar and schedule of the training algorithm.

    Epoch-valued schedule knobs are counted in (fractional) epochs of the
    current iteration.
    """

    inner_lr: float = 0.2
    lr: float = 0.2
    meta_lr: float = 0.4
    meta_lr_rampup_epochs: float = 5.0
    ema_decay_warmup: float = 0.99
    ema_decay: float = 0.999
    ema_warmup_epochs: int = 5
    n_synthetic: int = 10
    relabel_fraction: float = 0.5
    filter_threshold: float = 0.3
    teacher_weight_max: float = 0.5
    n_neighbors: int = 10
    batch_size: int = 64
    epochs: int = 30
    lr_decay_epoch: Optional[int] = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    meta_lr_rampup_every_iteration: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.inner_lr >= 0, "inner_lr must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.meta_lr >= 0, "meta_lr must be >= 0"),
            (self.meta_lr_rampup_epochs >= 0, "meta_lr_rampup_epochs must be >= 0"),
            (0 <= self.ema_decay_warmup <= 1 and 0 <= self.ema_decay <= 1, "EMA decays must be in [0, 1]"),
            (self.ema_warmup_epochs >= 0, "ema_warmup_epochs must be >= 0"),
            (isinstance(self.n_synthetic, (int, np.integer)) and self.n_synthetic >= 0, "n_synthetic must be an integer >= 0"),
            (0 <= self.relabel_fraction <= 1, "relabel_fraction must be in [0, 1]"),
            (0 <= self.filter_threshold <= 1, "filter_threshold must be in [0, 1]"),
            (0 <= self.teacher_weight_max <= 1, "teacher_weight_max must be in [0, 1]"),
            (self.n_neighbors >= 1, "n_neighbors must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InputError(msg)

    # schedules ------------------------------------------------------------------
    def meta_lr_at(self, iteration: int, progress: float) -> float:
        """Meta learning rate at ``progress`` epochs into ``iteration``: linear ramp, then flat."""
        ramp = iteration == 1 or self.meta_lr_rampup_every_iteration
        if not ramp or self.meta_lr_rampup_epochs == 0:
            return self.meta_lr
        return self.meta_lr * min(1.0, progress / self.meta_lr_rampup_epochs)

    def ema_decay_at(self, epoch: int) -> float:
        return self.ema_decay_warmup if epoch < self.ema_warmup_epochs else self.ema_decay

    def teacher_weight_at(self, epoch: int) -> float:
        """Teacher weight in the blended target: 0 at the first epoch, ``teacher_weight_max`` at the last."""
        if self.epochs == 1:
            return self.teacher_weight_max
        return self.teacher_weight_max * epoch / (self.epochs - 1)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch is not None and epoch >= self.lr_decay_epoch:
            return self.lr / 10.0
        return self.lr

    def n_relabel(self, batch_size: int) -> int:
        return int(math.floor(self.relabel_fraction * batch_size))


@dataclass
class IterationPlan:
    num_iterations: int = 3
    overrides: dict[int, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_iterations < 1:
            raise InputError("num_iterations must be >= 1")

    def hyper_for(self, iteration: int, base: MlntHyper) -> MlntHyper:
        over = self.overrides.get(iteration)
        return replace(base, **over) if over else base


# -- single-step pieces -----------------------------------------------------------

def meta_train_step(spec: MlpSpec, theta: ParamSet, X: np.ndarray, Y_hat: np.ndarray,
                    inner_lr: float) -> ParamSet:
    """One plain SGD step on cross-entropy against the synthetic labels ``Y_hat``."""
    cache, _ = forward(spec, theta, X)
    return sgd_step(theta, backward_ce(cache, Y_hat), inner_lr)


def consistency_loss(spec: MlpSpec, theta_prime: ParamSet, X: np.ndarray, target: np.ndarray) -> float:
    """Row-averaged ``KL(target || f(X, theta_prime))``."""
    return kl_divergence(target, predict_proba(spec, theta_prime, X))


def _meta_loss_value(spec, theta, X, variants, target, inner_lr) -> float:
    if len(variants) == 0:
        return 0.0
    cache, _ = forward(spec, theta, X)
    total = 0.0
    for Y_hat in variants:
        theta_m = sgd_step(theta, backward_ce(cache, Y_hat), inner_lr)
        total += kl_divergence(target, forward(spec, theta_m, X)[1])
    return total / len(variants)


def meta_loss_and_grad(spec: MlpSpec, theta: ParamSet, X: np.ndarray,
                       variants: SyntheticLabelSet | np.ndarray, target: np.ndarray, inner_lr: float,
                       mode: str = "first_order", fd_eps: float = 1e-5) -> tuple[float, GradSet]:
    """Average consistency loss over the stepped models, and its gradient w.r.t. ``theta``.

    ``first_order`` treats each inner step as a constant offset, so the gradient is
    the mean of the KL gradients taken at the stepped parameters. ``full_fd``
    differentiates the whole composite map (inner step included) by central
    differences; it costs ``2 * n_params`` meta-loss evaluations.
    """
    if mode not in META_MODES:
        raise InputError(f"mode must be one of {META_MODES}")
    variants = variants.variants if isinstance(variants, SyntheticLabelSet) else np.asarray(variants)
    n_variants = len(variants)
    if n_variants == 0:
        return 0.0, ParamSet.zeros(spec)
    if mode == "full_fd":
        loss = _meta_loss_value(spec, theta, X, variants, target, inner_lr)
        grad = finite_diff_grad(lambda p: _meta_loss_value(spec, p, X, variants, target, inner_lr),
                                theta, fd_eps)
    else:
        cache, _ = forward(spec, theta, X)
        loss, grad = 0.0, None
        for Y_hat in variants:
            theta_m = sgd_step(theta, backward_ce(cache, Y_hat), inner_lr)
            cache_m, probs_m = forward(spec, theta_m, X)
            loss += kl_divergence(target, probs_m)
            g = backward_kl(cache_m, target)
            grad = g if grad is None else grad + g
        loss /= n_variants
        grad = grad * (1.0 / n_variants)
    if not np.isfinite(loss):
        raise NumericError("meta loss is not finite")
    return loss, grad


def meta_update(theta: ParamSet, grad: GradSet, meta_lr: float) -> ParamSet:
    """Plain SGD on the meta loss: no momentum, no weight decay."""
    return sgd_step(theta, grad, meta_lr)


def _classification_step(spec, theta, opt_state, X, Y):
    cache, probs = forward(spec, theta, X)
    grad = backward_ce(cache, Y)
    ce = float(-np.mean(np.log(np.maximum(probs[Y == 1.0], 1e-12))))
    return momentum_step(opt_state, theta, grad), ce, probs


def classification_update(spec: MlpSpec, theta: ParamSet, opt_state: MomentumState,
                          X: np.ndarray, Y: np.ndarray) -> ParamSet:
    """Momentum-SGD step on the cross-entropy of the original mini-batch."""
    return _classification_step(spec, theta, opt_state, X, Y)[0]


def ema_update(teacher: ParamSet, theta: ParamSet, decay: float) -> ParamSet:
    """``decay * teacher + (1 - decay) * theta``."""
    if not 0.0 <= decay <= 1.0:
        raise InputError(f"decay must be in [0, 1], got {decay}")
    return teacher * decay + theta * (1.0 - decay)


def blend_targets(teacher_probs: np.ndarray, mentor_probs: np.ndarray, teacher_weight: float) -> np.ndarray:
    """``teacher_weight * teacher + (1 - teacher_weight) * mentor``, row by row."""
    teacher_probs, mentor_probs = np.asarray(teacher_probs), np.asarray(mentor_probs)
    if teacher_probs.shape != mentor_probs.shape:
        raise InputError(f"shape mismatch: {teacher_probs.shape} vs {mentor_probs.shape}")
    if not 0.0 <= teacher_weight <= 1.0:
        raise InputError("teacher_weight must be in [0, 1]")
    return teacher_weight * teacher_probs + (1.0 - teacher_weight) * mentor_probs


def filter_dataset(dataset: Dataset, mentor: Checkpoint, threshold: float) -> Dataset:
    """Keep samples whose mentor probability on their observed label is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError("threshold must be in [0, 1]")
    probs = predict_proba(mentor.spec, mentor.params, dataset.features)
    on_label = probs[np.arange(len(dataset)), dataset.labels]
    return dataset.subset(np.flatnonzero(on_label > threshold))


def accuracy(spec: MlpSpec, params: ParamSet, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    pred = np.argmax(predict_proba(spec, params, dataset.features), axis=1)
    return float(np.mean(pred == dataset.labels))


# -- training loops ----------------------------------------------------------------

@dataclass
class IterationResult:
    best: Checkpoint
    student: Checkpoint
    teacher: Checkpoint
    metrics: list[MetricsRow]
    filtered_count: int


def train_iteration(
    train: Dataset,
    val: Dataset,
    spec: MlpSpec,
    hyper: MlntHyper,
    feature_index: FeatureIndex | None,
    streams: RandomStreams,
    *,
    mentor: Checkpoint | None = None,
    iteration: int = 1,
    meta_mode: str = "first_order",
    metrics_path=None,
    on_step: Callable[[int, ParamSet, ParamSet], None] | None = None,
    init_params: ParamSet | None = None,
) -> IterationResult:
    """Run one full training iteration on ``train`` (already filtered when ``mentor`` is set).

    The consistency target is the teacher alone when ``mentor`` is None and a
    teacher/mentor blend otherwise. Student and teacher are scored on ``val``
    after every epoch; the best of all of them is returned as ``best``.
    """
    if len(train) == 0:
        raise ConfigError(f"iteration {iteration}: no training samples left")
    if train.n_features != spec.n_inputs or train.n_classes != spec.n_classes:
        raise ConfigError("dataset shape does not match the network spec")
    if hyper.n_synthetic > 0 and feature_index is None:
        raise ConfigError("n_synthetic > 0 needs a feature index for neighbour label transfer")
    if mentor is not None:
        mentor.params.check(spec)

    theta = init_params.clone() if init_params is not None else ParamSet.initialize(
        spec, streams.get("init", iteration))
    teacher = theta.clone()
    opt = MomentumState.zeros(spec, hyper.lr, hyper.momentum, hyper.weight_decay)
    batch_rng = streams.get("batches", iteration)
    label_rng = streams.get("synthetic-labels", iteration)
    feat_pos = feature_index.positions(train.ids) if hyper.n_synthetic > 0 else None

    n, k = len(train), hyper.batch_size
    steps_per_epoch = max(1, math.ceil(n / k))
    Y_all = one_hot(train.labels, spec.n_classes)
    metrics: list[MetricsRow] = []
    best = None
    best_key = None
    step = 0

    for epoch in range(hyper.epochs):
        opt.lr = hyper.lr_at(epoch)
        decay = hyper.ema_decay_at(epoch)
        teacher_weight = hyper.teacher_weight_at(epoch) if mentor is not None else 1.0
        perm = batch_rng.permutation(n)
        correct = 0
        ce_sum = meta_sum = 0.0
        meta_count = 0
        meta_lr = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * k:(s + 1) * k]
            X, Y = train.features[idx], Y_all[idx]
            meta_lr = hyper.meta_lr_at(iteration, epoch + s / steps_per_epoch)
            n_relabel = hyper.n_relabel(len(idx))
            if hyper.n_synthetic > 0 and len(idx) > 1:
                pos = feat_pos[idx]
                neighbors = neighbors_from_features(feature_index.features[pos], pos, hyper.n_neighbors)
                synthetic = generate_synthetic_labels(Y, neighbors, n_relabel, hyper.n_synthetic, label_rng)
                target = predict_proba(spec, teacher, X)
                if mentor is not None:
                    target = blend_targets(target, predict_proba(spec, mentor.params, X), teacher_weight)
                meta_loss, meta_grad = meta_loss_and_grad(spec, theta, X, synthetic, target,
                                                          hyper.inner_lr, meta_mode)
                meta_sum += meta_loss
                meta_count += 1
                if meta_lr > 0.0:
                    theta = meta_update(theta, meta_grad, meta_lr)
            theta, ce, probs = _classification_step(spec, theta, opt, X, Y)
            teacher = ema_update(teacher, theta, decay)
            correct += int(np.sum(np.argmax(probs, axis=1) == train.labels[idx]))
            ce_sum += ce * len(idx)
            step += 1
            if on_step is not None:
                on_step(step, theta, teacher)
        if not theta.is_finite():
            raise NumericError(f"iteration {iteration}, epoch {epoch}: parameters diverged")

        acc_s = accuracy(spec, theta, val)
        acc_t = accuracy(spec, teacher, val)
        row = MetricsRow(iteration, epoch, opt.lr, meta_lr, decay, teacher_weight, correct / n, acc_s, acc_t,
                         ce_sum / n, meta_sum / meta_count if meta_count else 0.0, n)
        metrics.append(row)
        if metrics_path is not None:
            append_metrics(row, metrics_path)
        logger.debug("iter %d epoch %d: val student %.4f teacher %.4f", iteration, epoch, acc_s, acc_t)
        for role, params, acc in (("student", theta, acc_s), ("teacher", teacher, acc_t)):
            key = (acc, role == "teacher", epoch)
            if best_key is None or key > best_key:
                best_key = key
                best = Checkpoint(spec, params.clone(), epoch, role, acc)

    last = hyper.epochs - 1
    return IterationResult(
        best=best,
        student=Checkpoint(spec, theta, last, "student", metrics[-1].val_acc_student),
        teacher=Checkpoint(spec, teacher, last, "teacher", metrics[-1].val_acc_teacher),
        metrics=metrics,
        filtered_count=n,
    )


@dataclass
class IterativeResult:
    final: Checkpoint
    iterations: list[IterationResult]

    @property
    def metrics(self) -> list[MetricsRow]:
        return [row for it in self.iterations for row in it.metrics]


def run_iterative_training(
    plan: IterationPlan,
    train: Dataset,
    val: Dataset,
    spec: MlpSpec,
    hyper: MlntHyper,
    feature_index: FeatureIndex | None,
    streams: RandomStreams,
    *,
    meta_mode: str = "first_order",
    metrics_path=None,
    on_iteration: Callable[[int, IterationResult], None] | None = None,
    first: IterationResult | None = None,
) -> IterativeResult:
    """Iteration 1 trains on everything; later iterations use the previous best as mentor.

    The mentor filters the classification data and is blended into the
    consistency target. Weights are freshly initialised in every iteration.
    ``first`` reuses an already computed iteration 1 (it must come from the
    same data, hyper-parameters and streams); sweeps over the filter
    threshold use it to avoid retraining an identical first iteration.
    """
    results: list[IterationResult] = []
    mentor = None
    for it in range(1, plan.num_iterations + 1):
        if it == 1 and first is not None:
            results.append(first)
            if on_iteration is not None:
                on_iteration(it, first)
            mentor = first.best
            continue
        hp = plan.hyper_for(it, hyper)
        data = train if mentor is None else filter_dataset(train, mentor, hp.filter_threshold)
        if len(data) == 0:
            raise ConfigError(f"iteration {it}: filter_threshold={hp.filter_threshold} filtered out every training sample")
        logger.info("iteration %d: %d/%d training samples", it, len(data), len(train))
        res = train_iteration(data, val, spec, hp, feature_index, streams, mentor=mentor,
                              iteration=it, meta_mode=meta_mode, metrics_path=metrics_path)
        results.append(res)
        if on_iteration is not None:
            on_iteration(it, res)
        mentor = res.best
    return IterativeResult(results[-1].best, results)


def pretrain_feature_extractor(train: Dataset, val: Dataset, spec: MlpSpec, hyper: MlntHyper,
                               streams: RandomStreams, epochs: int | None = None) -> IterationResult:
    """Plain cross-entropy training on the full noisy set.

    The final student weights (``result.student.params``) define the feature
    space for neighbour ranking. The same run doubles as the cross-entropy
    baseline: it shares the architecture, optimizer and epoch budget of a
    training iteration. Uses its own RNG keys (iteration 0) so it never
    shares draws with the runs that later consume its features.
    """
    hp = replace(hyper, n_synthetic=0, meta_lr=0.0, epochs=epochs or hyper.epochs)
    if hp.lr_decay_epoch is not None and epochs is not None:
        hp = replace(hp, lr_decay_epoch=int(round(hyper.lr_decay_epoch * epochs / hyper.epochs)))
    return train_iteration(train, val, spec, hp, None, streams, iteration=0)


def hyper_as_dict(hyper: MlntHyper) -> dict:
    return asdict(hyper)
