"""Acceptance criteria 1-10, one test each, with a pass/fail line per criterion in the summary.

The MNIST criteria share the session-scoped ``mnist_runs`` scenarios: 2,000
training examples, 10 clients, 2 attackers, one hidden layer of 32 units,
ratio 0.3%, 20 targets and 5 seeds.
"""

import time

import numpy as np
import pytest

import conftest
from conftest import MNIST_SEEDS, build_blob_world, needs_mnist, rel_err
from test_aggregation import oracle, random_instance
from test_influence import loo_correlation
from test_model import fd_gradient, random_problem, softmax_hessian
from unlearnlab.aggregation import aggregate_array
from unlearnlab.experiment import ExperimentConfig, run_experiment
from unlearnlab.federation import replay
from unlearnlab.model import hvp, inverse_hvp, loss_and_grad, predict
from unlearnlab.unlearning import UnlearnRequest, federaser_unlearn, retrain_oracle


def record(label, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"{label:<5} {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def test_c1_influence_tracks_leave_one_out():
    start = time.perf_counter()
    rhos = [loo_correlation(seed) for seed in range(3)]
    elapsed = time.perf_counter() - start
    ok = min(rhos) >= 0.8 and elapsed < 60
    assert record("C1", ok, f"Spearman {', '.join(f'{r:.3f}' for r in rhos)} (>= 0.8), {elapsed:.1f}s (< 60s)")


@needs_mnist
def test_c2_attack_success(mnist_runs):
    runs = mnist_runs("defended")
    asr = float(np.mean([b.asr for b in runs]))
    seconds = mnist_runs.seconds["defended"]
    ok = asr >= 0.5 and seconds < 600
    assert record("C2a", ok, f"mean ASR {asr:.3f} over {len(runs)} seeds (>= 0.5), {seconds:.0f}s (< 600s)")


@needs_mnist
def test_c2_benign_unlearning_rate(mnist_runs):
    runs = mnist_runs("defended")
    asr_b = float(np.mean([b.asr_b for b in runs]))
    per_seed = ", ".join(f"{b.asr_b:.2f}" for b in runs)
    assert record("C2b", asr_b <= 0.1, f"mean ASR-B {asr_b:.3f} (<= 0.1); per seed {per_seed}")


@needs_mnist
def test_c3_accuracy_is_preserved(mnist_runs):
    gaps = [abs(b.acc_g - b.acc_g_unlearned) * 100 for b in mnist_runs("defended")]
    assert record("C3", max(gaps) <= 2.0, f"max |Acc_G - Acc~_G| {max(gaps):.2f} points (<= 2)")


@needs_mnist
def test_c4_influence_beats_random(mnist_runs):
    isi = float(np.mean([b.asr for b in mnist_runs("defended")]))
    rnd = float(np.mean([b.asr for b in mnist_runs("random")]))
    assert record("C4", isi - rnd >= 0.3, f"ASR isi {isi:.3f} - random {rnd:.3f} = {isi - rnd:.3f} (>= 0.3)")


@needs_mnist
def test_c5_budget_monotonicity(mnist_runs):
    full = mnist_runs("defended")
    part = mnist_runs("eps06")
    wins = sum(a.asr >= b.asr for a, b in zip(full, part))
    pairs = ", ".join(f"{a.asr:.2f}/{b.asr:.2f}" for a, b in zip(full, part))
    assert record("C5", wins >= 4, f"ASR(1.0) >= ASR(0.6) in {wins}/{MNIST_SEEDS} seeds (>= 4); {pairs}")


@needs_mnist
def test_c6_defense_efficacy(mnist_runs):
    tenth = mnist_runs("defended")
    unit = mnist_runs("lam1")
    a_tenth = float(np.mean([b.defense["asr"] for b in tenth]))
    a_unit = float(np.mean([b.defense["asr"] for b in unit]))
    reduction = 1 - a_tenth / a_unit if a_unit else 0.0
    identical = all(b.defense["outcomes"] == [o.to_dict() for o in b.outcomes] for b in unit)
    ok = reduction >= 0.3 and identical
    assert record("C6", ok, f"ASR lam=1 {a_unit:.3f} -> lam=0.1 {a_tenth:.3f}, reduction {reduction:.0%} "
                            f"(>= 30%); lam=1 equals undefended per target: {identical}")


def test_c7_aggregation_rules_match_brute_force():
    failures = []
    for rule_name, seed in (("fedavg", 1), ("median", 2), ("trimmed_mean", 3), ("krum", 7)):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            rule, U = random_instance(rng, rule_name)
            got, idx = aggregate_array(rule, U)
            want, want_idx = oracle(rule, U.tolist())
            if got.tolist() != want or idx != want_idx:
                failures.append(rule_name)
    assert record("C7", not failures, f"4 rules x 100 instances, mismatches: {len(failures)}")


def test_c8_unlearning_sanity():
    w = build_blob_world(0)
    replay_ok = all(a == r.global_after for a, r in zip(replay(w.archive), w.archive.records))
    agreements = []
    for seed in range(3):
        ws = build_blob_world(seed)
        X, y = ws.shards[1]
        req = UnlearnRequest(1, X[:4], y[:4])
        fe = federaser_unlearn(ws.archive, ws.train, ws.partition, req)
        rt = retrain_oracle(ws.archive, ws.train, ws.partition, req)
        agreements.append(float(np.mean(predict(ws.spec, fe.unlearned_global, ws.test.X)
                                        == predict(ws.spec, rt.unlearned_global, ws.test.X))))
    ok = replay_ok and min(agreements) >= 0.95
    assert record("C8", ok, f"bitwise replay {replay_ok}; agreement {', '.join(f'{a:.3f}' for a in agreements)} "
                            f"(>= 0.95)")


def test_c9_numerical_suite():
    fd_worst = 0.0
    for seed in range(20):
        spec, params, X, y = random_problem(seed, d=3, c=3, n=20)
        _, g = loss_and_grad(spec, params, X, y)
        fd = fd_gradient(spec, params, X, y)
        denom = np.maximum(np.maximum(np.abs(g.values), np.abs(fd)), 1e-7)
        fd_worst = max(fd_worst, float(np.max(np.abs(g.values - fd) / denom)))
    lin_worst = sym_worst = 0.0
    for seed in range(10):
        spec, params, X, y = random_problem(seed, d=3, c=3, n=12)
        u, v = np.random.default_rng(seed + 1).normal(size=(2, len(params)))
        Hu = hvp(spec, params, X, y, params.replace(u)).values
        Hv = hvp(spec, params, X, y, params.replace(v)).values
        combo = hvp(spec, params, X, y, params.replace(2.0 * u - 0.5 * v)).values
        lin_worst = max(lin_worst, rel_err(combo, 2.0 * Hu - 0.5 * Hv))
        sym_worst = max(sym_worst, abs(v @ Hu - u @ Hv) / abs(v @ Hu))
    cg_worst = 0.0
    for seed in range(5):
        spec, params, X, y = random_problem(seed, d=4, c=3, n=25, l2=0.0)
        b = np.random.default_rng(seed).normal(size=len(params))
        dense = np.linalg.solve(softmax_hessian(spec, params.values, X, y) + 0.01 * np.eye(len(b)), b)
        res = inverse_hvp(spec, params, X, y, params.replace(b), damping=0.01, tol=1e-10)
        cg_worst = max(cg_worst, rel_err(res.solution.values, dense))
    ok = fd_worst < 1e-4 and lin_worst < 1e-4 and sym_worst < 1e-3 and cg_worst < 1e-4
    assert record("C9", ok, f"FD {fd_worst:.1e}, HVP linearity {lin_worst:.1e}, symmetry {sym_worst:.1e}, "
                            f"CG vs dense {cg_worst:.1e} (15 params)")


@needs_mnist
def test_c10_determinism(tmp_path):
    cfg = ExperimentConfig(name="determinism").with_overrides(
        {"federation.rounds": 5, "attack.target_count": 4, "defense.enabled": True})
    first = run_experiment(cfg, tmp_path / "a")
    second = run_experiment(cfg, tmp_path / "b")
    same = [a.to_json() == b.to_json() for a, b in zip(first, second)]
    assert record("C10", all(same), f"MNIST bundle re-run bitwise identical: {all(same)}")
