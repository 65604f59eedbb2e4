"""Shared fixtures: a separable blob federation and the desk-scale MNIST scenario runs."""

from __future__ import annotations

import importlib.util
import logging
import time
from types import SimpleNamespace

import numpy as np
import pytest

from unlearnlab.data import make_blobs, partition
from unlearnlab.experiment import ExperimentConfig, run_experiment
from unlearnlab.federation import FederationConfig, run_federation, shards_from_partition
from unlearnlab.model import ModelSpec

# Criterion lines collected by the acceptance suite, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []

HAS_MLXTEND = importlib.util.find_spec("mlxtend") is not None
needs_mnist = pytest.mark.skipif(not HAS_MLXTEND, reason="the MNIST sample needs mlxtend")

MNIST_SEEDS = 5
SCENARIOS = {
    # Attack with the IQR defense at lam = 0.1 (undefended numbers come from the same runs).
    "defended": {"defense.enabled": True, "defense.lam": 0.1},
    "lam1": {"defense.enabled": True, "defense.lam": 1.0},
    "random": {"attack.mode": "random"},
    "eps06": {"attack.epsilon_fraction": 0.6},
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def blob_config(seed: int = 0, **overrides) -> FederationConfig:
    base = dict(num_clients=10, clients_per_round=10, rounds=20, local_epochs=1, batch_size=16,
                learning_rate=0.5, momentum=0.0, aggregation="fedavg", seed=seed)
    base.update(overrides)
    return FederationConfig(**base)


def build_blob_world(seed: int = 0, hidden=(), **fed_overrides) -> SimpleNamespace:
    ds = make_blobs(600, seed=seed)
    train, test = ds.subset(range(400), "blobs"), ds.subset(range(400, 600), "blobs_test")
    spec = ModelSpec(2, 2, hidden, "relu", 1e-3)
    cfg = blob_config(seed, **fed_overrides)
    part = partition(train, cfg.num_clients, "iid", seed)
    final, archive = run_federation(cfg, spec, train, part)
    return SimpleNamespace(spec=spec, config=cfg, train=train, test=test, partition=part,
                           shards=shards_from_partition(train, part), final=final, archive=archive)


@pytest.fixture(scope="session")
def blob_world():
    return build_blob_world(0)


def blob_experiment(output_dir, **overrides) -> ExperimentConfig:
    """Small end-to-end harness config on blobs; runs in well under a second per repetition."""
    cfg = ExperimentConfig(name="blob", output_dir=str(output_dir)).with_overrides({
        "data.source": "blobs", "data.n_train": 400, "data.n_test": 200,
        "model.hidden_layers": (), "federation.rounds": 8, "federation.local_epochs": 1,
        "federation.batch_size": 16, "federation.learning_rate": 0.5, "federation.momentum": 0.0,
        "attack.p": 2, "attack.target_count": 3, "defense.enabled": True,
    })
    return cfg.with_overrides(overrides) if overrides else cfg


class MnistRuns:
    """Lazily runs each scenario over ``MNIST_SEEDS`` seeds, sharing influence reports."""

    def __init__(self, root):
        self.root = root
        self.cache: dict = {}
        self.bundles: dict = {}
        self.seconds: dict = {}

    def __call__(self, name: str):
        if name not in self.bundles:
            cfg = ExperimentConfig(name=name, repetitions=MNIST_SEEDS)
            cfg = cfg.with_overrides(SCENARIOS[name])
            start = time.perf_counter()
            self.bundles[name] = run_experiment(cfg, self.root / name, cache=self.cache)
            self.seconds[name] = time.perf_counter() - start
        return self.bundles[name]


@pytest.fixture(scope="session")
def mnist_runs(tmp_path_factory):
    if not HAS_MLXTEND:
        pytest.skip("the MNIST sample needs mlxtend")
    logging.getLogger("unlearnlab").setLevel(logging.ERROR)
    return MnistRuns(tmp_path_factory.mktemp("mnist"))


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
