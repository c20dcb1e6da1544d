"""Tape autodiff tests: per-primitive finite differences, a hand-built golden
fixture with a loop-based oracle, exact reductions, and a mutation probe."""

from __future__ import annotations

import math

import numpy as np
import pytest

import vlodtta.grad
from vlodtta.adapt import AdapterParams, AdaptState
from vlodtta.checks import random_objective_instance
from vlodtta.data import PromptPool, ProposalSet
from vlodtta.grad import (
    ObjectiveConstants,
    Tape,
    backward,
    fd_check,
    forward_objective,
    gelu,
    gelu_grad,
)
from vlodtta.scoring import detector_scores, entropy, posterior

# frozen from the loop-based oracle below; the tape reproduced it bit-for-bit
GOLDEN_LOSS = 0.07258398173920992


# -- small helpers --------------------------------------------------------- #

def _numeric_grads(build, arrays, eps=1e-6):
    """Central differences of a scalar-valued builder over its leaf arrays."""
    out = []
    for target in range(len(arrays)):
        grad = np.zeros_like(arrays[target])
        flat = arrays[target].reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = build(arrays)
            flat[i] = orig - eps
            lo = build(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out.append(grad)
    return out


def _check_primitive(build_tape, arrays, tol=1e-6):
    """build_tape(tape, leaves) must return the scalar output node."""

    def forward_value(arrs):
        tape = Tape()
        leaves = [tape.leaf(f"x{i}", a) for i, a in enumerate(arrs)]
        return float(build_tape(tape, leaves).value)

    tape = Tape()
    leaves = [tape.leaf(f"x{i}", a) for i, a in enumerate(arrays)]
    tape.output = build_tape(tape, leaves)
    tape.run_backward()
    numeric = _numeric_grads(forward_value, arrays)
    for leaf, num in zip(leaves, numeric):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        err = np.max(np.abs(analytic - num) / np.maximum(1.0, np.abs(num)))
        assert err <= tol, f"max rel err {err:.3e}"


def _rng_arrays(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1.0, 1.0, size=s) for s in shapes]


_W = np.array([1.0, 2.0, 0.5, 1.5, 0.7])


# -- gelu ------------------------------------------------------------------- #

def test_gelu_values():
    assert gelu(np.array([0.0]))[0] == 0.0
    # large positive x passes through, large negative dies
    assert gelu(np.array([10.0]))[0] == pytest.approx(10.0, abs=1e-9)
    assert gelu(np.array([-10.0]))[0] == pytest.approx(0.0, abs=1e-9)
    # gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) computed independently
    assert gelu(np.array([1.0]))[0] == pytest.approx(
        0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0))), abs=1e-12
    )


def test_gelu_grad_matches_fd():
    xs = np.linspace(-3, 3, 41)
    eps = 1e-6
    fd = (gelu(xs + eps) - gelu(xs - eps)) / (2 * eps)
    np.testing.assert_allclose(gelu_grad(xs), fd, atol=1e-8)


# -- per-primitive finite differences -------------------------------------- #

def test_matmul_grad():
    a, b = _rng_arrays(1, (5, 3), (3, 4))
    _check_primitive(
        lambda t, lv: t.weighted_mean(t.softmax_entropy(t.matmul(lv[0], lv[1]), 7.0), _W),
        [a, b],
    )


def test_matmul_transpose_b_grad():
    a, b = _rng_arrays(2, (5, 3), (4, 3))
    _check_primitive(
        lambda t, lv: t.weighted_mean(
            t.softmax_entropy(t.matmul(lv[0], lv[1], transpose_b=True), 7.0), _W
        ),
        [a, b],
    )


def test_add_and_row_vector_grad():
    a, b, v = _rng_arrays(3, (5, 4), (5, 4), (4,))
    _check_primitive(
        lambda t, lv: t.weighted_mean(
            t.softmax_entropy(t.add_row_vector(t.add(lv[0], lv[1]), lv[2]), 5.0), _W
        ),
        [a, b, v],
    )


def test_gelu_node_grad():
    (a,) = _rng_arrays(4, (5, 4))
    _check_primitive(
        lambda t, lv: t.weighted_mean(t.softmax_entropy(t.gelu(lv[0]), 6.0), _W),
        [a],
    )


def test_normalize_rows_grad():
    (a,) = _rng_arrays(5, (5, 4))
    a += np.sign(a.sum(axis=1, keepdims=True)) * 0.5  # keep rows away from zero
    _check_primitive(
        lambda t, lv: t.weighted_mean(t.softmax_entropy(t.normalize_rows(lv[0]), 6.0), _W),
        [a],
    )


def test_mix_grad():
    a, b = _rng_arrays(6, (5, 4), (5, 4))
    _check_primitive(
        lambda t, lv: t.weighted_mean(t.softmax_entropy(t.mix(lv[0], lv[1], 0.3), 6.0), _W),
        [a, b],
    )


def test_weighted_mean_grad():
    (a,) = _rng_arrays(7, (5, 3))
    _check_primitive(
        lambda t, lv: t.weighted_mean(t.softmax_entropy(lv[0], 4.0), _W),
        [a],
    )


# -- golden fixture --------------------------------------------------------- #

def _fixture():
    """Small fully literal instance: d=4, hidden=2, N=4, K=2, one prompt each."""
    features = (((np.arange(16).reshape(4, 4) * 7) % 11) - 5.0) * 0.23 + 0.05
    class_emb = (((np.arange(8).reshape(2, 4) * 5) % 7) - 3.0) * 0.31 + 0.02
    pool = (((np.arange(16).reshape(2, 2, 4) * 3) % 13) - 6.0) * 0.17
    w_down = (((np.arange(8).reshape(4, 2) * 9) % 5) - 2.0) * 0.21
    b_down = np.array([0.05, -0.1])
    w_up = (((np.arange(8).reshape(2, 4) * 11) % 6) - 2.5) * 0.13
    b_up = np.array([0.02, -0.03, 0.04, -0.01])
    delta = np.array([0.11, -0.07, 0.05, 0.19])
    weights = np.array([2.0, 1.0, 3.0, 1.5])
    kept = np.array([0, 1, 2, 3])
    selections = np.array([[1], [0]])
    boxes = np.array([[10.0 * i, 0.0, 10.0 * i + 5.0, 5.0] for i in range(4)])
    proposals = ProposalSet(boxes=boxes, features=features, class_embeddings=class_emb)
    phi = AdapterParams(
        w_down=w_down.copy(), b_down=b_down.copy(), w_up=w_up.copy(),
        b_up=b_up.copy(), reduction=2,
    )
    state = AdaptState(phi=phi, delta=delta.copy(), phi0=phi.copy(), delta0=delta.copy())
    constants = ObjectiveConstants(
        weights=weights, selections=selections, kept=kept, lam=0.3, kappa=12.0
    )
    return proposals, PromptPool(pool), state, constants


def _oracle_loss(proposals, pool, state, constants):
    """The same objective in scalar loops and math.*, no numpy linear algebra."""

    def dot(a, b):
        return sum(float(x) * float(y) for x, y in zip(a, b))

    def unit(a):
        n = math.sqrt(dot(a, a))
        return [float(x) / n for x in a]

    def gelu_scalar(x):
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))

    phi, delta = state.phi, state.delta
    d = proposals.d
    hid = phi.w_down.shape[1]
    num_classes = proposals.num_classes
    adapted = []
    for i in constants.kept:
        v = [float(x) for x in proposals.features[i]]
        hidden = [
            gelu_scalar(sum(v[a] * float(phi.w_down[a, j]) for a in range(d)) + float(phi.b_down[j]))
            for j in range(hid)
        ]
        out = [
            v[j] + sum(hidden[a] * float(phi.w_up[a, j]) for a in range(hid)) + float(phi.b_up[j])
            for j in range(d)
        ]
        adapted.append(unit(out))

    class_dirs = [unit([float(x) for x in proposals.class_embeddings[k]]) for k in range(num_classes)]
    prompt_dirs = [
        [unit([float(pool.embeddings[k, t, a]) + float(delta[a]) for a in range(d)])
         for t in constants.selections[k]]
        for k in range(num_classes)
    ]

    entropies = []
    for v in adapted:
        fused = []
        for k in range(num_classes):
            base = dot(v, class_dirs[k])
            pooled = sum(dot(v, p) for p in prompt_dirs[k]) / len(prompt_dirs[k])
            fused.append(constants.lam * pooled + (1.0 - constants.lam) * base)
        zmax = max(constants.kappa * g for g in fused)
        exps = [math.exp(constants.kappa * g - zmax) for g in fused]
        zsum = sum(exps)
        probs = [e / zsum for e in exps]
        entropies.append(-sum(p * math.log(p) for p in probs if p > 0.0))

    wsum = sum(float(w) for w in constants.weights)
    return sum(float(w) * h for w, h in zip(constants.weights, entropies)) / wsum


def test_golden_fixture_loss():
    proposals, pool, state, constants = _fixture()
    loss, _ = forward_objective(proposals, pool, state, constants)
    assert loss == pytest.approx(_oracle_loss(proposals, pool, state, constants), abs=1e-12)
    assert loss == pytest.approx(GOLDEN_LOSS, abs=1e-12)


def test_golden_fixture_fd():
    proposals, pool, state, constants = _fixture()
    assert fd_check(proposals, pool, state, constants) <= 1e-4


def test_replay_is_bit_identical():
    proposals, pool, state, constants = _fixture()
    loss, tape = forward_objective(proposals, pool, state, constants)
    assert tape.replay() == loss
    backward(tape)  # a backward pass must not disturb recorded values
    assert tape.replay() == loss


# -- random-instance checks -------------------------------------------------- #

def test_fd_check_random_instances():
    for seed in range(10):
        proposals, pool, state, constants = random_objective_instance(seed, max_n=24)
        worst = fd_check(proposals, pool, state, constants)
        assert worst <= 1e-4, f"seed {seed}: {worst:.3e}"


def test_fd_check_rejects_bad_eps():
    proposals, pool, state, constants = _fixture()
    with pytest.raises(ValueError):
        fd_check(proposals, pool, state, constants, eps=1.0)


def test_mutation_in_entropy_grad_is_caught(monkeypatch):
    """fd_check must flag a deliberately broken backward formula."""

    def wrong(scores, kappa):
        p = posterior(scores, kappa)
        logp = np.log(np.where(p > 0.0, p, 1.0))
        return -kappa * p * logp  # missing the +H term

    monkeypatch.setattr(vlodtta.grad, "_entropy_score_grad", wrong)
    proposals, pool, state, constants = random_objective_instance(3, max_n=16)
    assert fd_check(proposals, pool, state, constants) > 1e-4


# -- structural reductions ---------------------------------------------------- #

def _zero_init_instance(seed=11, n=6, k=3, t=4, d=8):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 80, size=(n, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(2, 20, size=(n, 2))], axis=1)
    features = rng.normal(size=(n, d))
    class_emb = rng.normal(size=(k, d))
    pool = rng.normal(size=(k, t, d))
    proposals = ProposalSet(boxes=boxes, features=features, class_embeddings=class_emb)
    state = AdaptState.zero_init(d, reduction=2)
    return proposals, PromptPool(pool), state


def test_lambda_zero_gamma_zero_reduces_to_mean_entropy():
    proposals, pool, state = _zero_init_instance()
    n = proposals.n
    constants = ObjectiveConstants(
        weights=np.ones(n), selections=np.array([[0], [1], [2]]),
        kept=np.arange(n), lam=0.0, kappa=20.0,
    )
    loss, _ = forward_objective(proposals, pool, state, constants)
    expected = float(np.mean(entropy(posterior(
        detector_scores(proposals.features, proposals.class_embeddings), 20.0
    ))))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_lambda_zero_delta_gradient_is_exactly_zero():
    proposals, pool, state, constants = random_objective_instance(5, max_n=16)
    constants = ObjectiveConstants(
        weights=constants.weights, selections=constants.selections,
        kept=constants.kept, lam=0.0, kappa=constants.kappa,
    )
    _, tape = forward_objective(proposals, pool, state, constants)
    grads = backward(tape)
    assert np.all(grads.delta == 0.0)
    assert np.any(grads.w_up != 0.0)  # the detector branch still trains


def _uniform_instance(k, seed=17):
    """Identical embeddings for every class, so every fused row is constant."""
    rng = np.random.default_rng(seed)
    d, n, t = 6, 5, 2
    features = rng.normal(size=(n, d))
    class_emb = np.tile(rng.normal(size=d), (k, 1))
    pool = np.tile(rng.normal(size=d), (k, t, 1))
    xy = rng.uniform(0, 50, size=(n, 2))
    proposals = ProposalSet(
        boxes=np.concatenate([xy, xy + 5.0], axis=1),
        features=features, class_embeddings=class_emb,
    )
    state = AdaptState.zero_init(d, reduction=2)
    constants = ObjectiveConstants(
        weights=np.ones(n), selections=np.zeros((k, 1), dtype=int),
        kept=np.arange(n), lam=0.3, kappa=20.0,
    )
    return proposals, PromptPool(pool), state, constants


def test_uniform_posterior_two_classes_gives_exactly_zero_grads():
    # with two classes p = 0.5 and H = -ln(1/2) are exact floats, so the
    # closed-form entropy gradient cancels to exactly zero
    proposals, pool, state, constants = _uniform_instance(k=2)
    loss, tape = forward_objective(proposals, pool, state, constants)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    grads = backward(tape)
    for g in (grads.w_down, grads.b_down, grads.w_up, grads.b_up, grads.delta):
        assert np.all(g == 0.0)


def test_uniform_posterior_three_classes_grads_vanish():
    # p = 1/3 is not an exact float, so only near-zero survives the rounding
    proposals, pool, state, constants = _uniform_instance(k=3)
    loss, tape = forward_objective(proposals, pool, state, constants)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    grads = backward(tape)
    for g in (grads.w_down, grads.b_down, grads.w_up, grads.b_up, grads.delta):
        assert np.max(np.abs(g)) <= 1e-14


def test_weight_doubling_is_exactly_invariant():
    proposals, pool, state, constants = random_objective_instance(8, max_n=20)
    doubled = ObjectiveConstants(
        weights=2.0 * constants.weights, selections=constants.selections,
        kept=constants.kept, lam=constants.lam, kappa=constants.kappa,
    )
    loss_a, tape_a = forward_objective(proposals, pool, state, constants)
    loss_b, tape_b = forward_objective(proposals, pool, state, doubled)
    assert loss_a == loss_b
    ga, gb = backward(tape_a), backward(tape_b)
    for name in ("w_down", "b_down", "w_up", "b_up", "delta"):
        np.testing.assert_array_equal(getattr(ga, name), getattr(gb, name))


def test_objective_rejects_empty_kept_and_bad_weights():
    proposals, pool, state, constants = random_objective_instance(9, max_n=12)
    empty = ObjectiveConstants(
        weights=np.zeros(0), selections=constants.selections,
        kept=np.zeros(0, dtype=int), lam=0.3, kappa=20.0,
    )
    with pytest.raises(ValueError):
        forward_objective(proposals, pool, state, empty)
    zero_w = ObjectiveConstants(
        weights=np.zeros_like(constants.weights), selections=constants.selections,
        kept=constants.kept, lam=0.3, kappa=20.0,
    )
    with pytest.raises(ValueError):
        forward_objective(proposals, pool, state, zero_w)
