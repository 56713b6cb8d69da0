"""Small dense feedforward classifier with analytic gradients.

Everything is float64 numpy. A network is described by an :class:`MlpSpec`
and its weights live in a :class:`ParamSet`; gradients use the same container.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DimensionError, InputError, NumericError, StateError

LOG_CLAMP = 1e-12
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[d_in, h_1, ..., h_L, c]`` plus the hidden nonlinearity."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise InputError("an MLP needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise InputError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in ACTIVATIONS:
            raise InputError(
                f"hidden_activation must be one of {ACTIVATIONS}, got {self.hidden_activation!r}"
            )

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [
            ((n_out, n_in), (n_out,))
            for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        ]

    @property
    def n_params(self) -> int:
        return sum(w[0] * w[1] + b[0] for w, b in self.shapes())

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "hidden_activation": self.hidden_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d.get("hidden_activation", "relu"))


class ParamSet:
    """Ordered per-layer ``(weight[h_l x h_{l-1}], bias[h_l])`` arrays.

    Arithmetic always returns a new ParamSet; the arrays of the operands are
    never written to.
    """

    __slots__ = ("weights", "biases")

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases):
            raise DimensionError("weights and biases must have the same number of layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    # construction -----------------------------------------------------------
    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParamSet":
        return cls([np.zeros(w) for w, _ in spec.shapes()], [np.zeros(b) for _, b in spec.shapes()])

    @classmethod
    def initialize(cls, spec: MlpSpec, rng: np.random.Generator) -> "ParamSet":
        """He-normal weights for ReLU nets, Glorot-normal for tanh; zero biases."""
        weights, biases = [], []
        for (n_out, n_in), _ in spec.shapes():
            if spec.hidden_activation == "relu":
                std = np.sqrt(2.0 / n_in)
            else:
                std = np.sqrt(2.0 / (n_in + n_out))
            weights.append(rng.normal(0.0, std, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @classmethod
    def from_flat(cls, spec: MlpSpec, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != spec.n_params:
            raise DimensionError(f"expected {spec.n_params} parameters, got {flat.size}")
        weights, biases, pos = [], [], 0
        for (w_shape, b_shape) in spec.shapes():
            n = w_shape[0] * w_shape[1]
            weights.append(flat[pos:pos + n].reshape(w_shape).copy())
            pos += n
            biases.append(flat[pos:pos + b_shape[0]].copy())
            pos += b_shape[0]
        return cls(weights, biases)

    # inspection -------------------------------------------------------------
    def flat(self) -> np.ndarray:
        """Concatenate as ``W_1 (row-major), b_1, W_2, b_2, ...``."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(w.shape, b.shape) for w, b in zip(self.weights, self.biases)]

    def matches(self, spec: MlpSpec) -> bool:
        return self.shapes() == spec.shapes()

    def check(self, spec: MlpSpec) -> None:
        if not self.matches(spec):
            raise DimensionError(f"parameter shapes {self.shapes()} do not match {spec.shapes()}")

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))

    def clone(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of every entry."""
        return self.shapes() == other.shapes() and all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    # arithmetic -------------------------------------------------------------
    def _zip(self, other: "ParamSet", op) -> "ParamSet":
        if self.shapes() != other.shapes():
            raise DimensionError(f"shape mismatch: {self.shapes()} vs {other.shapes()}")
        return ParamSet(
            [op(a, b) for a, b in zip(self.weights, other.weights)],
            [op(a, b) for a, b in zip(self.biases, other.biases)],
        )

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self._zip(other, np.add)

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self._zip(other, np.subtract)

    def __mul__(self, scalar: float) -> "ParamSet":
        return ParamSet([w * scalar for w in self.weights], [b * scalar for b in self.biases])

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"ParamSet(shapes={self.shapes()})"


# gradients share the container
GradSet = ParamSet


@dataclass
class ActivationCache:
    """Everything :func:`backward_ce` / :func:`backward_kl` need from a forward pass."""

    spec: MlpSpec
    params: ParamSet
    inputs: list[np.ndarray]  # input to each layer (X, a_1, ..., a_L)
    preacts: list[np.ndarray]  # z_1 ... z_{L+1}; the last one is the logits
    probs: np.ndarray
    shapes: list = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def forward(spec: MlpSpec, params: ParamSet, X: np.ndarray) -> tuple[ActivationCache, np.ndarray]:
    """Run the network on ``X`` (k x d_in); returns the cache and softmax probabilities."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise DimensionError(f"expected input of shape (k, {spec.n_inputs}), got {X.shape}")
    params.check(spec)
    inputs, preacts = [], []
    a = X
    last = spec.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        if i < last:
            a = _activate(z, spec.hidden_activation)
    probs = softmax(preacts[-1])
    return ActivationCache(spec, params, inputs, preacts, probs, params.shapes()), probs


def logits(spec: MlpSpec, params: ParamSet, X: np.ndarray) -> np.ndarray:
    """Pre-softmax activations of the final layer."""
    cache, _ = forward(spec, params, X)
    return cache.logits


def predict_proba(spec: MlpSpec, params: ParamSet, X: np.ndarray) -> np.ndarray:
    return forward(spec, params, X)[1]


def _check_one_hot(Y: np.ndarray) -> None:
    if not (np.all((Y == 0.0) | (Y == 1.0)) and np.all(Y.sum(axis=1) == 1.0)):
        raise InputError("label matrix rows must be one-hot")


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    Y = np.zeros((labels.size, n_classes))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def cross_entropy(probs: np.ndarray, Y: np.ndarray) -> float:
    """Mean of ``-y_i . log p_i`` over rows, with log arguments clamped at 1e-12."""
    probs, Y = np.asarray(probs, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if probs.shape != Y.shape:
        raise DimensionError(f"probabilities {probs.shape} and labels {Y.shape} differ in shape")
    _check_one_hot(Y)
    picked = probs[Y == 1.0]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    """Row-averaged ``KL(P || Q)``; ``P`` is the target, ``Q`` the model being trained.

    Terms with ``P_ij == 0`` contribute nothing.
    """
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise DimensionError(f"shape mismatch: {P.shape} vs {Q.shape}")
    logp = np.log(np.maximum(P, LOG_CLAMP))
    logq = np.log(np.maximum(Q, LOG_CLAMP))
    terms = np.where(P > 0.0, P * (logp - logq), 0.0)
    return float(max(terms.sum() / P.shape[0], 0.0))


def _backward(cache: ActivationCache, dlogits: np.ndarray) -> GradSet:
    spec, params = cache.spec, cache.params
    if params.shapes() != cache.shapes or not params.matches(spec):
        raise StateError("activation cache is stale: parameter shapes changed since forward")
    n = spec.n_layers
    gw, gb = [None] * n, [None] * n
    delta = dlogits
    for i in range(n - 1, -1, -1):
        gw[i] = delta.T @ cache.inputs[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            da = delta @ params.weights[i]
            delta = da * _activate_grad(cache.preacts[i - 1], cache.inputs[i], spec.hidden_activation)
    return GradSet(gw, gb)


def backward_ce(cache: ActivationCache, Y: np.ndarray) -> GradSet:
    """Gradient of :func:`cross_entropy` with respect to every parameter."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != cache.probs.shape:
        raise DimensionError(f"labels {Y.shape} do not match outputs {cache.probs.shape}")
    return _backward(cache, (cache.probs - Y) / Y.shape[0])


def backward_kl(cache: ActivationCache, P_target: np.ndarray) -> GradSet:
    """Gradient of ``kl_divergence(P_target, student)``; the target is held constant."""
    P_target = np.asarray(P_target, dtype=np.float64)
    if P_target.shape != cache.probs.shape:
        raise DimensionError(f"target {P_target.shape} does not match outputs {cache.probs.shape}")
    # d/dz KL(P || softmax(z)) = softmax(z) - P for rows of P summing to one
    return _backward(cache, (cache.probs - P_target) / P_target.shape[0])


def sgd_step(params: ParamSet, grads: GradSet, step: float) -> ParamSet:
    """``params - step * grads`` as a new ParamSet."""
    if params.shapes() != grads.shapes():
        raise DimensionError("parameter and gradient shapes differ")
    return ParamSet(
        [w - step * g for w, g in zip(params.weights, grads.weights)],
        [b - step * g for b, g in zip(params.biases, grads.biases)],
    )


@dataclass
class MomentumState:
    """Velocity buffer plus settings of heavy-ball SGD with L2 weight decay."""

    velocity: GradSet
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InputError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise InputError("weight_decay must be non-negative")
        if self.lr <= 0.0:
            raise InputError("lr must be positive")

    @classmethod
    def zeros(cls, spec: MlpSpec, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        return cls(ParamSet.zeros(spec), lr, momentum, weight_decay)


def momentum_step(state: MomentumState, params: ParamSet, grads: GradSet) -> ParamSet:
    """``v <- mu v + (g + wd theta)``; ``theta <- theta - lr v``. Mutates ``state.velocity``."""
    if not (params.shapes() == grads.shapes() == state.velocity.shapes()):
        raise DimensionError("parameter, gradient and velocity shapes differ")
    mu, wd, lr = state.momentum, state.weight_decay, state.lr

    def update(p, g, v):
        v_next = mu * v + (g + wd * p)
        return p - lr * v_next, v_next

    w_pairs = [update(*t) for t in zip(params.weights, grads.weights, state.velocity.weights)]
    b_pairs = [update(*t) for t in zip(params.biases, grads.biases, state.velocity.biases)]
    state.velocity = GradSet([v for _, v in w_pairs], [v for _, v in b_pairs])
    return ParamSet([p for p, _ in w_pairs], [p for p, _ in b_pairs])


def finite_diff_grad(
    loss_fn: Callable[[ParamSet], float], params: ParamSet, eps: float = 1e-5
) -> GradSet:
    """Central-difference gradient of ``loss_fn``, one coordinate at a time."""
    if eps <= 0:
        raise InputError("eps must be positive")
    shapes = params.shapes()
    flat = params.flat()
    spec_like = _FlatLayout(shapes)
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = loss_fn(spec_like.unflatten(flat))
        flat[j] = orig - eps
        down = loss_fn(spec_like.unflatten(flat))
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss is not finite around coordinate {j}")
        grad[j] = (up - down) / (2.0 * eps)
    return spec_like.unflatten(grad)


class _FlatLayout:
    def __init__(self, shapes):
        self.shapes = shapes

    def unflatten(self, flat: np.ndarray) -> ParamSet:
        weights, biases, pos = [], [], 0
        for w_shape, b_shape in self.shapes:
            n = int(np.prod(w_shape))
            weights.append(flat[pos:pos + n].reshape(w_shape).copy())
            pos += n
            biases.append(flat[pos:pos + b_shape[0]].copy())
            pos += b_shape[0]
        return ParamSet(weights, biases)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` on flattened arrays; 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b) / denom)
