"""Federated training loop and the per-round history archive."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .aggregation import AggregationRule, aggregate_array
from .data import Dataset, Partition
from .defense import DefenseConfig, DefenseReport, defend_round, gradient_norm
from .errors import ContractViolation
from .model import ModelSpec, ParamVector, init_params, loss_grad_flat

Shard = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 10
    clients_per_round: int = 10
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.0
    aggregation: str = "fedavg"
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ContractViolation("num_clients must be positive")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ContractViolation("clients_per_round must lie in [1, num_clients]")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ContractViolation("rounds, local_epochs and batch_size out of range")
        if self.learning_rate < 0 or not 0.0 <= self.momentum < 1.0:
            raise ContractViolation("learning_rate must be >= 0 and momentum in [0, 1)")
        rule = AggregationRule.parse(self.aggregation)
        rule.check(self.clients_per_round)
        object.__setattr__(self, "aggregation", str(rule))

    @property
    def rule(self) -> AggregationRule:
        return AggregationRule.parse(self.aggregation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FederationConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class RoundRecord:
    round_index: int
    participant_ids: list[int]
    client_updates: dict[int, ParamVector]
    global_before: ParamVector
    global_after: ParamVector
    flagged: list[int] = field(default_factory=list)

    @property
    def gradient_norms(self) -> dict[int, float]:
        return {cid: gradient_norm(u) for cid, u in self.client_updates.items()}


@dataclass
class HistoryArchive:
    records: list[RoundRecord]
    config: FederationConfig
    model_spec: ModelSpec
    initial: ParamVector
    defense: DefenseConfig | None = None

    @property
    def final(self) -> ParamVector:
        return self.records[-1].global_after if self.records else self.initial

    def participation(self, client_id: int) -> list[int]:
        return [r.round_index for r in self.records if client_id in r.participant_ids]

    def save(self, directory) -> None:
        """Directory layout: ``manifest.json`` plus ``round_XXXX.bin`` per round.

        Each round file holds little-endian float64 values: the participant
        ids, their update vectors in participant order, then ``global_before``
        and ``global_after``.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": self.config.to_dict(),
            "model_spec": self.model_spec.to_dict(),
            "defense": self.defense.to_dict() if self.defense else None,
            "round_count": len(self.records),
            "param_count": self.model_spec.param_count,
            "participants_per_round": [len(r.participant_ids) for r in self.records],
            "flagged": [r.flagged for r in self.records],
        }
        (d / "manifest.json").write_text(json.dumps(meta, indent=2))
        self.initial.values.astype("<f8").tofile(d / "initial.bin")
        for r in self.records:
            parts = [np.asarray(r.participant_ids, dtype="<f8")]
            parts += [r.client_updates[c].values for c in r.participant_ids]
            parts += [r.global_before.values, r.global_after.values]
            np.concatenate(parts).astype("<f8").tofile(d / f"round_{r.round_index:04d}.bin")

    @classmethod
    def load(cls, directory) -> "HistoryArchive":
        d = Path(directory)
        meta = json.loads((d / "manifest.json").read_text())
        spec = ModelSpec.from_dict(meta["model_spec"])
        config = FederationConfig.from_dict(meta["config"])
        defense = DefenseConfig.from_dict(meta["defense"]) if meta.get("defense") else None
        manifest = spec.manifest
        P = spec.param_count
        initial = ParamVector(np.fromfile(d / "initial.bin", dtype="<f8"), manifest)
        records = []
        for i in range(meta["round_count"]):
            raw = np.fromfile(d / f"round_{i:04d}.bin", dtype="<f8")
            k = meta["participants_per_round"][i]
            if raw.size != k + (k + 2) * P:
                raise ContractViolation(f"round file {i} has unexpected length")
            ids = [int(v) for v in raw[:k]]
            body = raw[k:]
            updates = {cid: ParamVector(body[j * P:(j + 1) * P].copy(), manifest) for j, cid in enumerate(ids)}
            before = ParamVector(body[k * P:(k + 1) * P].copy(), manifest)
            after = ParamVector(body[(k + 1) * P:].copy(), manifest)
            records.append(RoundRecord(i, ids, updates, before, after, list(meta["flagged"][i])))
        return cls(records, config, spec, initial, defense)


def client_rng(seed, round_index: int = 0, client_id: int = 0) -> np.random.Generator:
    """Per-client generator keyed on (seed, round, client) so scheduling cannot matter."""
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [int(seed), int(round_index), int(client_id)]
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def sgd_delta(spec: ModelSpec, w0: np.ndarray, X: np.ndarray, y: np.ndarray, epochs: int,
              batch_size: int, lr: float, momentum: float, rng: np.random.Generator,
              keep: np.ndarray | None = None) -> np.ndarray:
    """Mini-batch SGD with heavy-ball momentum; returns ``w_final - w0``.

    ``keep`` masks rows out of training without changing the shuffle: batches
    are cut from a permutation of all ``len(X)`` rows and masked rows are then
    dropped, so a shard minus a few rows sees the same batch layout as the
    full shard under the same generator.
    """
    return sgd_steps(spec, w0, X, y, epochs, batch_size, lr, momentum, rng, keep)[0]


def sgd_steps(spec: ModelSpec, w0: np.ndarray, X: np.ndarray, y: np.ndarray, epochs: int,
              batch_size: int, lr: float, momentum: float, rng: np.random.Generator,
              keep: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Same as :func:`sgd_delta` but also returns the number of optimizer steps taken."""
    n = X.shape[0]
    w = w0.copy()
    vel = np.zeros_like(w)
    bs = min(batch_size, n)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if keep is not None:
                idx = idx[keep[idx]]
                if idx.size == 0:
                    continue
            _, g = loss_grad_flat(spec, w, X[idx], y[idx])
            vel = momentum * vel + g
            w = w - lr * vel
            steps += 1
    return w - w0, steps


def local_train(spec: ModelSpec, global_params: ParamVector, client_data: Dataset | Shard,
                epochs: int, batch_size: int, lr: float, momentum: float, seed) -> ParamVector:
    """Train a local copy from ``global_params`` and return the update delta."""
    X, y = (client_data.X, client_data.y) if isinstance(client_data, Dataset) else client_data
    if len(y) == 0:
        raise ContractViolation("client dataset is empty")
    rng = seed if isinstance(seed, np.random.Generator) else client_rng(seed)
    delta = sgd_delta(spec, global_params.values, np.asarray(X, dtype=np.float64),
                      np.asarray(y, dtype=np.int64), epochs, batch_size, lr, momentum, rng)
    return global_params.replace(delta)


def shards_from_partition(dataset: Dataset, partition: Partition) -> dict[int, Shard]:
    return {cid: (dataset.X[idx], dataset.y[idx]) for cid, idx in partition.assignments.items()}


def sample_participants(config: FederationConfig, client_ids: Sequence[int]) -> list[list[int]]:
    """Participant lists for every round, uniform without replacement, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5A11]))
    ids = np.asarray(sorted(client_ids))
    return [sorted(int(c) for c in rng.choice(ids, size=config.clients_per_round, replace=False))
            for _ in range(config.rounds)]


def apply_round(rule: str, before: ParamVector, updates: Mapping[int, ParamVector],
                order: Sequence[int], defense: DefenseConfig | None = None,
                round_index: int | None = None, phase: str = "train",
                report: DefenseReport | None = None) -> tuple[ParamVector, list[int]]:
    """Optionally defend, then aggregate ``updates`` (in ``order``) onto ``before``."""
    flagged: set[int] = set()
    if defense is not None:
        updates, flagged, norms = defend_round(updates, before.manifest, defense, round_index, phase)
        if report is not None and round_index is not None:
            report.record(round_index, norms, flagged)
    agg, _ = aggregate_array(rule, np.stack([updates[c].values for c in order]))
    return before.replace(before.values + agg), sorted(flagged)


def run_federation(config: FederationConfig, model_spec: ModelSpec, dataset: Dataset | None,
                   partition: Partition | None, shards: Mapping[int, Shard] | None = None,
                   defense: DefenseConfig | None = None, workers: int = 1,
                   report: DefenseReport | None = None) -> tuple[ParamVector, HistoryArchive]:
    """Run ``config.rounds`` rounds of federated training.

    Client data comes from ``dataset``/``partition`` unless ``shards`` supplies
    per-client arrays directly (used by the retraining oracle).
    """
    if shards is None:
        if dataset is None or partition is None:
            raise ContractViolation("need either dataset and partition, or shards")
        if partition.num_clients != config.num_clients:
            raise ContractViolation("partition client count does not match config")
        if max(partition.covered()) >= len(dataset):
            raise ContractViolation("partition refers to rows outside the dataset")
        shards = shards_from_partition(dataset, partition)
    if len(shards) != config.num_clients:
        raise ContractViolation("shard count does not match config")
    for cid, (X, _) in shards.items():
        if X.shape[1] != model_spec.input_dim:
            raise ContractViolation(f"client {cid} features do not match model input_dim")

    initial = init_params(model_spec, config.seed)
    current = initial
    records: list[RoundRecord] = []
    schedule = sample_participants(config, list(shards))

    def train_one(args):
        r, cid, w = args
        X, y = shards[cid]
        if len(y) == 0:
            return np.zeros_like(w.values)
        return sgd_delta(model_spec, w.values, X, y, config.local_epochs, config.batch_size,
                         config.learning_rate, config.momentum, client_rng(config.seed, r, cid))

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for r, participants in enumerate(schedule):
            jobs = [(r, cid, current) for cid in participants]
            deltas = list(pool.map(train_one, jobs)) if pool else [train_one(j) for j in jobs]
            updates = {cid: current.replace(d) for cid, d in zip(participants, deltas)}
            after, flagged = apply_round(config.aggregation, current, updates, participants,
                                         defense, r, "train", report)
            records.append(RoundRecord(r, participants, updates, current, after, flagged))
            current = after
    finally:
        if pool:
            pool.shutdown()
    return current, HistoryArchive(records, config, model_spec, initial, defense)


def replay(archive: HistoryArchive) -> list[ParamVector]:
    """Re-aggregate stored updates round by round; returns each round's global_after."""
    current = archive.initial
    out = []
    for rec in archive.records:
        current, _ = apply_round(archive.config.aggregation, current, rec.client_updates,
                                 rec.participant_ids, archive.defense, rec.round_index, "train")
        out.append(current)
    return out
