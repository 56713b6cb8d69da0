"""scikit-learn wrappers around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .data import Dataset
from .nn import MlpSpec, ParamSet, logits, predict_proba
from .noise import build_feature_index
from .random_streams import RandomStreams
from .training import IterationPlan, MlntHyper, pretrain_feature_extractor, run_iterative_training


def _seed(random_state) -> int:
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    return int(check_random_state(random_state).randint(np.iinfo(np.int32).max))


def _split_validation(X, y, fraction, seed):
    """Hold out ``floor(fraction * n)`` rows; with nothing held out the training rows double as validation."""
    n = X.shape[0]
    n_val = int(np.floor(fraction * n))
    if n_val == 0 or n_val == n:
        return X, y, X, y
    order = RandomStreams(seed).get("split").permutation(n)
    val, train = np.sort(order[:n_val]), np.sort(order[n_val:])
    return X[train], y[train], X[val], y[val]


class _MlpParams:
    """Parameters shared by the classifier and the feature transformer."""

    def _hyper(self, **extra) -> MlntHyper:
        decay = self.lr_decay_epoch
        if decay is None:
            decay = int(np.floor(2 * self.epochs / 3))
        return MlntHyper(
            lr=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_decay_epoch=decay,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            **extra,
        )

    def _spec(self, n_features: int, n_classes: int) -> MlpSpec:
        return MlpSpec((n_features, *self.hidden_layer_sizes, n_classes), self.activation)


class MLNTClassifier(_MlpParams, ClassifierMixin, BaseEstimator):
    """Multilayer perceptron trained to tolerate noisy labels.

    Before each ordinary cross-entropy step the weights take a meta step: the
    mini-batch labels are perturbed ``n_synthetic`` times by copying labels
    from feature-space neighbours, one SGD step is simulated per perturbed
    copy, and the weights move so that the simulated models still agree with
    an exponential-moving-average teacher. Later training rounds
    (``n_iterations > 1``) drop samples the previous round's best model finds
    implausible.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, default=(64,)
    activation : {"relu", "tanh"}, default="relu"
    n_iterations : int, default=3
        Training rounds; each round restarts from fresh weights.
    epochs : int, default=30
        Epochs per round. The cross-entropy pre-training that supplies the
        neighbour features uses ``pretrain_epochs`` (default: same).
    batch_size : int, default=64
    learning_rate : float, default=0.2
        Momentum-SGD rate of the cross-entropy step; divided by 10 at
        ``lr_decay_epoch`` (default: two thirds of ``epochs``).
    inner_learning_rate : float, default=0.2
        Size of the simulated step on each perturbed copy.
    meta_learning_rate : float, default=0.4
        Rate of the meta step, ramped up linearly over the first
        ``meta_rampup_epochs`` epochs of the first round.
    n_synthetic : int, default=10
        Perturbed label copies per mini-batch. ``0`` gives plain
        cross-entropy training with an averaged teacher alongside.
    relabel_fraction : float, default=0.5
        Fraction of each mini-batch relabelled in every copy.
    n_neighbors : int, default=10
    filter_threshold : float, default=0.3
        From round 2 on, a sample is kept only if the previous best model
        gives its label probability above this value.
    ema_decay_warmup, ema_decay : float, default=0.99, 0.999
        Teacher averaging coefficient during and after the first
        ``ema_warmup_epochs`` epochs.
    teacher_weight_max : float, default=0.5
    validation_fraction : float, default=0.1
        Held-out share of the training rows used for checkpoint selection
        when ``fit`` gets no explicit validation set.
    meta_mode : {"first_order", "full_fd"}, default="first_order"
        ``full_fd`` differentiates through the simulated step by finite
        differences; only practical for a few hundred weights.
    random_state : int, RandomState or None

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    n_features_in_ : int
    spec_ : MlpSpec
    params_ : ParamSet
        Weights of the checkpoint with the best validation accuracy in the
        last round.
    feature_params_ : ParamSet
        Weights of the cross-entropy pre-training run.
    history_ : list of dict
        Per-epoch metrics of every round.
    """

    def __init__(self, hidden_layer_sizes=(64,), activation="relu", n_iterations=3, epochs=30,
                 batch_size=64, learning_rate=0.2, lr_decay_epoch=None, momentum=0.9, weight_decay=1e-4,
                 inner_learning_rate=0.2, meta_learning_rate=0.4, meta_rampup_epochs=5.0,
                 n_synthetic=10, relabel_fraction=0.5, n_neighbors=10, filter_threshold=0.3,
                 ema_decay_warmup=0.99, ema_decay=0.999, ema_warmup_epochs=5, teacher_weight_max=0.5,
                 validation_fraction=0.1, pretrain_epochs=None, meta_mode="first_order", random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.n_iterations = n_iterations
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_epoch = lr_decay_epoch
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.inner_learning_rate = inner_learning_rate
        self.meta_learning_rate = meta_learning_rate
        self.meta_rampup_epochs = meta_rampup_epochs
        self.n_synthetic = n_synthetic
        self.relabel_fraction = relabel_fraction
        self.n_neighbors = n_neighbors
        self.filter_threshold = filter_threshold
        self.ema_decay_warmup = ema_decay_warmup
        self.ema_decay = ema_decay
        self.ema_warmup_epochs = ema_warmup_epochs
        self.teacher_weight_max = teacher_weight_max
        self.validation_fraction = validation_fraction
        self.pretrain_epochs = pretrain_epochs
        self.meta_mode = meta_mode
        self.random_state = random_state

    def _mlnt_hyper(self) -> MlntHyper:
        return self._hyper(
            inner_lr=self.inner_learning_rate,
            meta_lr=self.meta_learning_rate,
            meta_lr_rampup_epochs=self.meta_rampup_epochs,
            ema_decay_warmup=self.ema_decay_warmup,
            ema_decay=self.ema_decay,
            ema_warmup_epochs=self.ema_warmup_epochs,
            n_synthetic=self.n_synthetic,
            relabel_fraction=self.relabel_fraction,
            filter_threshold=self.filter_threshold,
            teacher_weight_max=self.teacher_weight_max,
            n_neighbors=self.n_neighbors,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; ``(X_val, y_val)`` selects checkpoints and should hold trustworthy labels."""
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        hyper = self._mlnt_hyper()
        plan = IterationPlan(self.n_iterations)
        seed = _seed(self.random_state)
        if X_val is None:
            X_tr, y_tr, X_v, y_v = _split_validation(X, y_idx, self.validation_fraction, seed)
        else:
            X_v = validate_data(self, X_val, reset=False, dtype=np.float64)
            y_v = self._encode(y_val)
            X_tr, y_tr = X, y_idx
        c = len(self.classes_)
        train = Dataset(X_tr, y_tr, c)
        val = Dataset(X_v, y_v, c, split="val")
        self.spec_ = self._spec(X.shape[1], c)
        streams = RandomStreams(seed)
        pre = pretrain_feature_extractor(train, val, self.spec_, hyper, streams, self.pretrain_epochs)
        self.feature_params_ = pre.student.params
        index = build_feature_index(train.features, self.spec_, self.feature_params_, train.ids)
        result = run_iterative_training(plan, train, val, self.spec_, hyper, index, streams,
                                        meta_mode=self.meta_mode)
        self.params_ = result.final.params
        self.best_checkpoint_ = result.final
        self.history_ = [dict(zip(("iteration", "epoch", "step_lr", "eta", "gamma", "lambda",
                                   "train_acc_noisy", "val_acc_student", "val_acc_teacher",
                                   "ce_loss", "meta_loss", "filtered_count"), row.values()))
                         for row in result.metrics]
        return self

    def _encode(self, y):
        y = np.asarray(y).ravel()
        pos = np.searchsorted(self.classes_, y)
        pos = np.clip(pos, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[pos] == y):
            raise ValueError("y_val contains labels not seen in y")
        return pos

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return predict_proba(self.spec_, self.params_, X)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def decision_function(self, X):
        """Pre-softmax outputs."""
        check_is_fitted(self, "params_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        z = logits(self.spec_, self.params_, X)
        return z[:, 1] - z[:, 0] if len(self.classes_) == 2 else z


class PreSoftmaxFeatures(_MlpParams, TransformerMixin, BaseEstimator):
    """Train a plain cross-entropy MLP on ``(X, y)`` and map inputs to its pre-softmax outputs.

    These are the features neighbour label transfer ranks samples by.
    """

    def __init__(self, hidden_layer_sizes=(64,), activation="relu", epochs=30, batch_size=64,
                 learning_rate=0.2, lr_decay_epoch=None, momentum=0.9, weight_decay=1e-4, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_epoch = lr_decay_epoch
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        c = len(self.classes_)
        train = Dataset(X, y_idx, c)
        self.spec_ = self._spec(X.shape[1], c)
        hyper = self._hyper(n_synthetic=0, meta_lr=0.0)
        res = pretrain_feature_extractor(train, train, self.spec_, hyper, RandomStreams(_seed(self.random_state)))
        self.params_: ParamSet = res.student.params
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return logits(self.spec_, self.params_, X)
