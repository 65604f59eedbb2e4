import logging
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unlearnlab.data import make_blobs
from unlearnlab.errors import ContractViolation, EmptySelectionError
from unlearnlab.influence import (TargetSpec, craft_malicious_samples, influence_scores,
                                  select_influential)
from unlearnlab.model import ModelSpec, ParamVector, init_params

L2 = 1e-2


# ------------------------------------------------------------------ leave-one-out oracle

def _probs(w, X):
    d = X.shape[1]
    z = X @ w[:2 * d].reshape(d, 2) + w[2 * d:]
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _newton_fit(X, y, w0, iters=50):
    """Exact minimiser of mean CE + L2/2 ||w||^2 for two-class softmax regression."""
    n, d = X.shape
    Xt = np.hstack([X, np.ones((n, 1))])
    w = w0.copy()
    for _ in range(iters):
        P = _probs(w, X)
        R = P.copy()
        R[np.arange(n), y] -= 1.0
        g = np.einsum("ni,nc->ic", Xt, R)
        grad = np.concatenate([g[:d].ravel(), g[d]]) / n + L2 * w
        H = np.zeros((w.size, w.size))
        for x, p in zip(Xt, P):
            blk = np.kron(np.outer(x, x), np.diag(p) - np.outer(p, p))
            H += blk
        H = H / n + L2 * np.eye(w.size)
        step = np.linalg.solve(H, grad)
        w = w - step
        if np.linalg.norm(step) < 1e-13:
            break
    return w


def _target_loss(w, x, y):
    return -np.log(_probs(w, x[None, :])[0, y])


def _spearman(a, b):
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    return float(np.corrcoef(ra, rb)[0, 1])


def loo_fixture(seed):
    ds = make_blobs(61, spread=0.18, seed=seed)
    X, y = ds.X[:60], ds.y[:60]
    spec = ModelSpec(2, 2, (), "relu", L2)
    w_hat = _newton_fit(X, y, np.zeros(spec.param_count))
    target = TargetSpec(ds.X[60], int(ds.y[60]), 1, 0)
    return spec, X, y, w_hat, target


def loo_correlation(seed, damping=0.01):
    spec, X, y, w_hat, target = loo_fixture(seed)
    rep = influence_scores(spec, ParamVector(w_hat, spec.manifest), X, y, target, damping=damping, tol=1e-10)
    base = _target_loss(w_hat, target.features, target.label)
    deltas = np.empty(60)
    for i in range(60):
        keep = np.arange(60) != i
        w_i = _newton_fit(X[keep], y[keep], w_hat)
        deltas[i] = _target_loss(w_i, target.features, target.label) - base
    # Upweighting an example moves the target loss opposite to removing it.
    return _spearman(rep.scores, -deltas)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_influence_ranks_track_leave_one_out(seed):
    start = time.perf_counter()
    rho = loo_correlation(seed)
    assert rho >= 0.8
    assert time.perf_counter() - start < 60


# ------------------------------------------------------------------ scores

def test_confident_correct_example_without_l2_scores_zero():
    spec = ModelSpec(2, 2)
    # Logit gap of 2000 on the first example saturates the softmax exactly.
    params = ParamVector(np.array([1000.0, -1000.0, 0.0, 0.0, 0.0, 0.0]), spec.manifest)
    X = np.array([[1.0, 0.0], [0.0, 0.7], [0.0, 0.2]])
    y = np.array([0, 1, 0])
    rep = influence_scores(spec, params, X, y, TargetSpec(np.array([0.0, 0.5]), 1))
    assert rep.scores[0] == 0.0
    assert np.any(rep.scores[1:] != 0.0)


def test_duplicates_score_identically():
    spec, X, y, w_hat, target = loo_fixture(3)
    X2, y2 = np.vstack([X, X[:1]]), np.append(y, y[0])
    rep = influence_scores(spec, ParamVector(w_hat, spec.manifest), X2, y2, target)
    assert rep.scores[0] == rep.scores[-1]
    assert rep.scores.shape == (61,) and np.all(np.isfinite(rep.scores))
    assert rep.score_map[0] == rep.scores[0]


def test_scores_are_deterministic_and_report_solver_state():
    spec, X, y, w_hat, target = loo_fixture(4)
    p = ParamVector(w_hat, spec.manifest)
    a = influence_scores(spec, p, X, y, target, client_id=3)
    b = influence_scores(spec, p, X, y, target, client_id=3)
    assert np.array_equal(a.scores, b.scores)
    assert a.evaluated_on == 3 and a.converged and a.damping == 0.01


def test_damping_escalates_on_negative_curvature(caplog):
    rng = np.random.default_rng(0)
    spec = ModelSpec(3, 3, (6,), "tanh", 0.0)
    params = ParamVector(rng.normal(scale=2.0, size=spec.param_count), spec.manifest)
    X, y = rng.random((30, 3)), rng.integers(0, 3, 30)
    with caplog.at_level(logging.WARNING, logger="unlearnlab"):
        rep = influence_scores(spec, params, X, y, TargetSpec(rng.random(3), 1), damping=1e-4, cg_iters=50)
    assert rep.damping > 1e-4
    assert rep.damping <= 10.0 * (1 + 1e-9)
    assert np.all(np.isfinite(rep.scores))


def test_empty_shard_rejected():
    spec = ModelSpec(2, 2)
    with pytest.raises(ContractViolation):
        influence_scores(spec, init_params(spec, 0), np.zeros((0, 2)), [], TargetSpec(np.zeros(2), 0))


# ------------------------------------------------------------------ selection

def brute_select(scores, labels, n, p):
    neg = sorted((s, i) for i, s in enumerate(scores) if s < 0)
    if not neg:
        return None
    cand = [i for _, i in neg[:n]]
    counts = {}
    for i in cand:
        counts[labels[i]] = counts.get(labels[i], 0) + 1
    best = max(counts.values())
    chosen = min(l for l, c in counts.items() if c == best)
    picked = [i for i in cand if labels[i] == chosen][:p]
    return picked, chosen, p - len(picked)


def test_selection_example():
    sel = select_influential([-3, -2, -1, 1], [1, 1, 0, 0], n=3, p=2)
    assert sel.indices == [0, 1] and sel.chosen_label == 1 and sel.candidates == [0, 1, 2]


def test_selection_requires_negative_scores():
    with pytest.raises(EmptySelectionError):
        select_influential([0.5, 1.0, 0.0], [0, 1, 0], 2, 1)
    with pytest.raises(ContractViolation):
        select_influential([-1.0, -2.0], [0, 1], 3, 1)
    with pytest.raises(ContractViolation):
        select_influential([-1.0, -2.0], [0, 1], 1, 2)


def test_selection_shortfall_and_ties():
    sel = select_influential([-5, -4, -4, 2], [0, 1, 0, 1], n=3, p=3)
    assert sel.chosen_label == 0 and sel.indices == [0, 2] and sel.shortfall == 1
    # Equal label counts go to the smaller label; equal scores to the lower index.
    sel = select_influential([-1, -1, -1, -1], [2, 1, 2, 1], n=4, p=2)
    assert sel.chosen_label == 1 and sel.indices == [1, 3]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 200), st.data())
def test_selection_matches_brute_force(seed, n, data):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=200), int(rng.integers(0, 3)))
    labels = rng.integers(0, 4, 200)
    p = data.draw(st.integers(0, n))
    want = brute_select(scores.tolist(), labels.tolist(), n, p)
    if want is None:
        with pytest.raises(EmptySelectionError):
            select_influential(scores, labels, n, p)
        return
    sel = select_influential(scores, labels, n, p)
    assert (sel.indices, sel.chosen_label, sel.shortfall) == want


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_selection_invariant_to_positive_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    scores, labels = rng.normal(size=50), rng.integers(0, 3, 50)
    a = select_influential(scores, labels, 10, 4)
    b = select_influential(scores * c, labels, 10, 4)
    assert (a.indices, a.chosen_label) == (b.indices, b.chosen_label)


# ------------------------------------------------------------------ crafting

def test_full_fraction_lands_on_target():
    X = np.array([[0.2, 0.9], [0.7, 0.1]])
    t = np.array([0.5, 0.5])
    res = craft_malicious_samples(X, t, 1.0)
    np.testing.assert_allclose(res.perturbed, [t, t], atol=1e-15)
    np.testing.assert_allclose(res.zeta, 0.0, atol=1e-15)


def test_half_fraction_closed_form():
    res = craft_malicious_samples([[1.0, 0.0]], [0.0, 0.0], 0.5)
    np.testing.assert_allclose(res.perturbed, [[0.5, 0.0]])
    assert res.zeta[0] == pytest.approx(0.5) and np.linalg.norm(res.deltas[0]) == pytest.approx(0.5)
    assert res.epsilon[0] == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_residual_distance_identity(seed, frac):
    rng = np.random.default_rng(seed)
    X, t = rng.random((5, 6)), rng.random(6)
    res = craft_malicious_samples(X, t, frac)
    eps_max = np.linalg.norm(X - t, axis=1)
    np.testing.assert_allclose(res.zeta, (1 - frac) * eps_max, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(res.deltas, axis=1), res.epsilon, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_budget_holds_for_in_domain_data(seed, frac):
    rng = np.random.default_rng(seed)
    X = rng.choice([0.0, 0.5, 1.0], size=(4, 5)) * rng.random((4, 5))
    t = rng.random(5)
    res = craft_malicious_samples(X, t, frac)
    assert np.all(res.perturbed >= 0) and np.all(res.perturbed <= 1)
    assert np.all(np.linalg.norm(res.deltas, axis=1) <= res.epsilon + 1e-9)
    np.testing.assert_allclose(res.perturbed, X[res.kept] - res.deltas, atol=1e-12)


def test_out_of_domain_results_are_clamped_and_delta_recomputed():
    res = craft_malicious_samples([[1.4, 0.5]], [1.2, 0.5], 0.5)
    np.testing.assert_allclose(res.perturbed, [[1.0, 0.5]])
    np.testing.assert_allclose(res.deltas, [[0.4, 0.0]])
    assert res.zeta[0] == pytest.approx(0.2)


def test_coincident_sample_skipped(caplog):
    with caplog.at_level(logging.WARNING, logger="unlearnlab"):
        res = craft_malicious_samples([[0.3, 0.3], [0.1, 0.2]], [0.3, 0.3], 0.8)
    assert res.skipped == [0] and res.kept == [1] and res.perturbed.shape == (1, 2)
    assert "coincides" in caplog.text


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_fraction_out_of_range(frac):
    with pytest.raises(ContractViolation):
        craft_malicious_samples([[1.0]], [0.0], frac)
