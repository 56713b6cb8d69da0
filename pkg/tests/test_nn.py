import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlnt.exceptions import DimensionError, InputError, NumericError, StateError
from mlnt.nn import (
    MlpSpec, MomentumState, ParamSet, backward_ce, backward_kl, cross_entropy, finite_diff_grad,
    forward, kl_divergence, momentum_step, one_hot, relative_error, sgd_step, softmax,
)


def random_problem(rng, sizes, k=5, activation="relu"):
    spec = MlpSpec(tuple(sizes), activation)
    params = ParamSet.initialize(spec, rng)
    params = ParamSet(params.weights, [rng.normal(0, 0.3, b.shape) for b in params.biases])
    X = rng.normal(size=(k, sizes[0]))
    Y = one_hot(rng.integers(0, sizes[-1], size=k), sizes[-1])
    return spec, params, X, Y


def scalar_forward(params, x, activation):
    """Layer-by-layer forward pass with plain Python floats."""
    a = [float(v) for v in x]
    n = len(params.weights)
    for li, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = [sum(W[i][j] * a[j] for j in range(len(a))) + b[i] for i in range(len(b))]
        if li < n - 1:
            a = [max(v, 0.0) if activation == "relu" else math.tanh(v) for v in z]
        else:
            a = z
    m = max(a)
    e = [math.exp(v - m) for v in a]
    s = sum(e)
    return [v / s for v in e]


# -- forward -------------------------------------------------------------------

def test_forward_zero_params_is_uniform():
    spec = MlpSpec((3, 5, 4))
    _, probs = forward(spec, ParamSet.zeros(spec), np.random.default_rng(0).normal(size=(6, 3)))
    np.testing.assert_array_equal(probs, np.full((6, 4), 0.25))


def test_forward_closed_form_softmax():
    spec = MlpSpec((1, 2))
    params = ParamSet([np.array([[0.0], [1.0]])], [np.zeros(2)])
    _, probs = forward(spec, params, np.array([[math.log(3.0)]]))
    np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-15)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_scalar_evaluation(activation):
    rng = np.random.default_rng(1)
    spec, params, X, _ = random_problem(rng, (4, 6, 5, 3), k=3, activation=activation)
    _, probs = forward(spec, params, X)
    for row, x in zip(probs, X):
        np.testing.assert_allclose(row, scalar_forward(params, x, activation), rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width():
    spec = MlpSpec((3, 2))
    with pytest.raises(DimensionError):
        forward(spec, ParamSet.zeros(spec), np.zeros((4, 2)))


def test_softmax_is_stable_for_huge_logits():
    p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all()
    assert p[0, 0] == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    p = softmax(np.array([values]))
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p > 0).all()


# -- losses ----------------------------------------------------------------------

def test_cross_entropy_values():
    Y = np.eye(3)[[0, 1]]
    assert cross_entropy(Y.copy(), Y) == 0.0
    assert cross_entropy(np.full((2, 4), 0.25), np.eye(4)[[0, 3]]) == pytest.approx(math.log(4), abs=1e-12)
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    expected = (-math.log(0.7) - math.log(0.8)) / 2
    assert cross_entropy(probs, Y) == pytest.approx(expected, abs=1e-15)


def test_cross_entropy_rejects_soft_labels():
    with pytest.raises(InputError):
        cross_entropy(np.full((1, 2), 0.5), np.array([[0.5, 0.5]]))


def test_cross_entropy_clamps_log_zero():
    assert cross_entropy(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])) == pytest.approx(-math.log(1e-12))


def test_kl_values():
    P = np.array([[0.2, 0.3, 0.5]])
    assert kl_divergence(P, P) == 0.0
    assert kl_divergence(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_matches_termwise_sum():
    rng = np.random.default_rng(3)
    P, Q = rng.dirichlet(np.ones(3), size=2), rng.dirichlet(np.ones(3), size=2)
    manual = 0.0
    for i in range(2):
        for j in range(3):
            manual += P[i, j] * (math.log(P[i, j]) - math.log(Q[i, j]))
    assert kl_divergence(P, Q) == pytest.approx(manual / 2, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(DimensionError):
        kl_divergence(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_are_non_negative(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.dirichlet(np.ones(4), size=3), rng.dirichlet(np.ones(4), size=3)
    assert kl_divergence(P, Q) >= 0.0
    assert cross_entropy(Q, one_hot(rng.integers(0, 4, 3), 4)) >= 0.0


# -- gradients ---------------------------------------------------------------------

def loss_ce(spec, X, Y):
    return lambda p: cross_entropy(forward(spec, p, X)[1], Y)


def loss_kl(spec, X, P):
    return lambda p: kl_divergence(P, forward(spec, p, X)[1])


@pytest.mark.parametrize("sizes", [(3, 4), (3, 6, 4), (2, 5, 5, 3)])
@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_ce_and_kl_gradients_match_finite_differences(sizes, activation):
    rng = np.random.default_rng(sum(sizes))
    spec, params, X, Y = random_problem(rng, sizes, k=7, activation=activation)
    P = rng.dirichlet(np.ones(sizes[-1]), size=7)
    cache, _ = forward(spec, params, X)
    fd = finite_diff_grad(loss_ce(spec, X, Y), params, 1e-5)
    assert relative_error(backward_ce(cache, Y).flat(), fd.flat()) < 1e-4
    fd = finite_diff_grad(loss_kl(spec, X, P), params, 1e-5)
    assert relative_error(backward_kl(cache, P).flat(), fd.flat()) < 1e-4


def test_ce_gradient_zero_at_minimum():
    spec = MlpSpec((2, 2))
    # logits large enough that softmax rounds to exactly one-hot
    params = ParamSet([np.array([[800.0, 0.0], [-800.0, 0.0]])], [np.zeros(2)])
    X = np.array([[1.0, 0.0]])
    cache, probs = forward(spec, params, X)
    Y = np.array([[1.0, 0.0]])
    assert np.array_equal(probs, Y)
    assert not np.any(backward_ce(cache, Y).flat())


def test_ce_gradient_mean_invariant_to_duplication():
    rng = np.random.default_rng(4)
    spec, params, X, Y = random_problem(rng, (3, 5, 3), k=4)
    g1 = backward_ce(forward(spec, params, X)[0], Y).flat()
    g2 = backward_ce(forward(spec, params, np.vstack([X, X]))[0], np.vstack([Y, Y])).flat()
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_kl_gradient_zero_when_target_equals_student():
    rng = np.random.default_rng(5)
    spec, params, X, _ = random_problem(rng, (3, 4, 3))
    cache, probs = forward(spec, params, X)
    assert np.allclose(backward_kl(cache, probs).flat(), 0.0, atol=1e-17)


def test_kl_gradient_invariant_to_row_permutation():
    rng = np.random.default_rng(6)
    spec, params, X, _ = random_problem(rng, (3, 4, 3), k=6)
    P = rng.dirichlet(np.ones(3), size=6)
    perm = rng.permutation(6)
    g1 = backward_kl(forward(spec, params, X)[0], P).flat()
    g2 = backward_kl(forward(spec, params, X[perm])[0], P[perm]).flat()
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-16)


def test_backward_detects_stale_cache():
    rng = np.random.default_rng(7)
    spec, params, X, Y = random_problem(rng, (3, 4, 3))
    cache, _ = forward(spec, params, X)
    params.weights[0] = np.zeros((5, 3))
    with pytest.raises(StateError):
        backward_ce(cache, Y)


# -- optimisers ---------------------------------------------------------------------

def test_sgd_step_cases():
    p = ParamSet([np.array([[1.0]])], [np.array([0.0])])
    g = ParamSet([np.array([[0.5]])], [np.array([0.0])])
    assert sgd_step(p, g, 0.2).weights[0][0, 0] == pytest.approx(0.9)
    assert sgd_step(p, g, 0.0).equals(p)
    rng = np.random.default_rng(8)
    spec, params, *_ = random_problem(rng, (3, 4, 2))
    grads = ParamSet.initialize(spec, rng)
    d1 = (sgd_step(params, grads, 0.1) - params).flat()
    d2 = (sgd_step(params, grads, 0.2) - params).flat()
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-12, atol=1e-15)


def test_sgd_step_is_pure():
    rng = np.random.default_rng(9)
    spec, params, *_ = random_problem(rng, (3, 4, 2))
    before = params.clone()
    sgd_step(params, params, 0.5)
    assert params.equals(before)


def test_momentum_degenerates_to_sgd():
    rng = np.random.default_rng(10)
    spec, params, *_ = random_problem(rng, (3, 4, 2))
    grads = ParamSet.initialize(spec, rng)
    state = MomentumState.zeros(spec, lr=0.3, momentum=0.0, weight_decay=0.0)
    assert momentum_step(state, params, grads).equals(sgd_step(params, grads, 0.3))


def test_momentum_velocity_geometric_series():
    spec = MlpSpec((2, 2))
    g = ParamSet([np.full((2, 2), 0.7)], [np.full(2, -0.3)])
    state = MomentumState.zeros(spec, lr=0.01, momentum=0.9)
    params = ParamSet.zeros(spec)
    before = params.clone()
    for _ in range(25):
        params = momentum_step(state, params, g)
    factor = (1 - 0.9 ** 25) / (1 - 0.9)
    np.testing.assert_allclose(state.velocity.flat(), g.flat() * factor, rtol=1e-12)
    assert ParamSet.zeros(spec).equals(before)


def test_momentum_weight_decay_only():
    spec = MlpSpec((2, 2))
    params = ParamSet([np.array([[1.0, -2.0], [3.0, 0.5]])], [np.array([1.0, 2.0])])
    state = MomentumState.zeros(spec, lr=0.1, momentum=0.9, weight_decay=0.01)
    out = momentum_step(state, params, ParamSet.zeros(spec))
    np.testing.assert_allclose(out.flat(), params.flat() - 0.1 * 0.01 * params.flat(), rtol=1e-15)


def test_momentum_state_validation():
    with pytest.raises(InputError):
        MomentumState.zeros(MlpSpec((2, 2)), lr=0.1, momentum=1.0)


# -- finite differences ---------------------------------------------------------------

def test_finite_diff_quadratic_and_constant():
    p = ParamSet([np.array([[1.0, -2.0]])], [np.array([0.5])])
    g = finite_diff_grad(lambda q: 0.5 * float(np.sum(q.flat() ** 2)), p, 1e-5)
    np.testing.assert_allclose(g.flat(), p.flat(), atol=1e-9)
    assert not np.any(finite_diff_grad(lambda q: 3.0, p, 1e-5).flat())


def test_finite_diff_matches_backward_on_2_16_4():
    rng = np.random.default_rng(11)
    spec, params, X, Y = random_problem(rng, (2, 16, 4), k=9)
    fd = finite_diff_grad(loss_ce(spec, X, Y), params, 1e-5)
    assert relative_error(backward_ce(forward(spec, params, X)[0], Y).flat(), fd.flat()) < 1e-4


def test_finite_diff_rejects_non_finite_and_bad_eps():
    p = ParamSet([np.zeros((1, 1))], [np.zeros(1)])
    with pytest.raises(NumericError):
        finite_diff_grad(lambda q: float("nan"), p, 1e-5)
    with pytest.raises(InputError):
        finite_diff_grad(lambda q: 0.0, p, 0.0)


def test_paramset_flat_roundtrip():
    rng = np.random.default_rng(12)
    spec, params, *_ = random_problem(rng, (3, 7, 2))
    assert ParamSet.from_flat(spec, params.flat()).equals(params)
    assert params.flat().size == spec.n_params
    with pytest.raises(DimensionError):
        ParamSet.from_flat(spec, np.zeros(spec.n_params + 1))


def test_spec_validation():
    with pytest.raises(InputError):
        MlpSpec((3,))
    with pytest.raises(InputError):
        MlpSpec((3, 2), "sigmoid")
