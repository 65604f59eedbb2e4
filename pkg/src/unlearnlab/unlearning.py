"""Federated unlearning: calibrated replay of the training history and a retraining oracle."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, Example, Partition
from .defense import DefenseConfig, DefenseReport
from .errors import ContractViolation, UnresolvableRequestError
from .federation import (HistoryArchive, Shard, apply_round, client_rng, run_federation,
                         sgd_steps, shards_from_partition)
from .model import ParamVector, loss_grad_flat, predict

log = logging.getLogger(__name__)

MODES = ("federaser", "retrain")


@dataclass(frozen=True)
class UnlearnRequest:
    client_id: int
    forget_features: np.ndarray
    forget_labels: np.ndarray
    mode: str = "federaser"

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.forget_features, dtype=np.float64))
        y = np.asarray(self.forget_labels, dtype=np.int64).reshape(-1)
        if y.size == 0:
            raise ContractViolation("forget set must be nonempty")
        if X.shape[0] != y.size:
            raise ContractViolation("forget features and labels differ in length")
        if self.mode not in MODES:
            raise ContractViolation(f"unknown unlearning mode {self.mode!r}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "forget_features", X)
        object.__setattr__(self, "forget_labels", y)

    @classmethod
    def from_examples(cls, client_id: int, examples: Sequence[Example], mode: str = "federaser"):
        if not examples:
            raise ContractViolation("forget set must be nonempty")
        return cls(client_id, np.stack([e.features for e in examples]),
                   np.array([e.label for e in examples]), mode)

    @property
    def forget_set(self) -> list[Example]:
        return [Example(x, int(c)) for x, c in zip(self.forget_features, self.forget_labels)]

    def to_json(self) -> str:
        return json.dumps({"client_id": int(self.client_id), "mode": self.mode,
                           "features": self.forget_features.tolist(),
                           "labels": self.forget_labels.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "UnlearnRequest":
        d = json.loads(text)
        return cls(int(d["client_id"]), np.asarray(d["features"], dtype=np.float64),
                   np.asarray(d["labels"], dtype=np.int64), d.get("mode", "federaser"))


@dataclass
class UnlearnOutcome:
    """Result of one unlearning run.

    ``norm_trace`` has one ``(round, client, stored_norm, calibrated_norm)``
    row per calibrated update (before any removal term is added).
    """

    unlearned_global: ParamVector
    calibration_rounds_used: int
    wall_steps: int
    zero_norm_rounds: int = 0
    removal_rounds_used: int = 0
    unmatched_forget: int = 0
    norm_trace: list[tuple[int, int, float, float]] = field(default_factory=list)
    flagged: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.unlearned_global.values)):
            raise ContractViolation("unlearned model is not finite")

    def summary(self) -> dict:
        return {"calibration_rounds_used": self.calibration_rounds_used,
                "wall_steps": self.wall_steps, "zero_norm_rounds": self.zero_norm_rounds,
                "removal_rounds_used": self.removal_rounds_used,
                "unmatched_forget": self.unmatched_forget,
                "flagged": {str(r): f for r, f in sorted(self.flagged.items())}}

    def write(self, directory, stem: str = "unlearned") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2))
        self.unlearned_global.values.astype("<f8").tofile(d / f"{stem}.bin")


def _as_requests(request) -> list[UnlearnRequest]:
    reqs = [request] if isinstance(request, UnlearnRequest) else list(request)
    merged: dict[int, UnlearnRequest] = {}
    for r in reqs:
        if r.client_id in merged:
            prev = merged[r.client_id]
            r = UnlearnRequest(r.client_id, np.vstack([prev.forget_features, r.forget_features]),
                               np.concatenate([prev.forget_labels, r.forget_labels]), r.mode)
        merged[r.client_id] = r
    return [merged[c] for c in sorted(merged)]


def _client_shards(archive: HistoryArchive, dataset: Dataset | None, partition: Partition | None,
                   shards: Mapping[int, Shard] | None) -> dict[int, Shard]:
    if shards is None:
        if dataset is None or partition is None:
            raise ContractViolation("need either dataset and partition, or shards")
        shards = shards_from_partition(dataset, partition)
    if len(shards) != archive.config.num_clients:
        raise ContractViolation("shard count does not match the archive")
    return {int(c): (np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64))
            for c, (X, y) in shards.items()}


def match_forget_rows(shard: Shard, request: UnlearnRequest) -> tuple[np.ndarray, int]:
    """Boolean keep-mask over the shard after removing exact matches of the forget set.

    Each forget example removes at most one matching row (feature bytes and
    label identical). Returns the mask and the number of forget examples that
    matched nothing.
    """
    X, y = shard
    rows: dict[tuple[int, bytes], list[int]] = {}
    for i in range(len(y)):
        rows.setdefault((int(y[i]), X[i].tobytes()), []).append(i)
    keep = np.ones(len(y), dtype=bool)
    unmatched = 0
    for x, label in zip(request.forget_features, request.forget_labels):
        bucket = rows.get((int(label), np.ascontiguousarray(x).tobytes()))
        if bucket:
            keep[bucket.pop(0)] = False
        else:
            unmatched += 1
    return keep, unmatched


def federaser_unlearn(archive: HistoryArchive, dataset: Dataset | None, partition: Partition | None,
                      request: UnlearnRequest | Sequence[UnlearnRequest],
                      calibration_epochs: int = 1, calibration_lr: float | None = None, *,
                      removal_rate: float = 0.0, removal_rounds: int | None = None,
                      shards: Mapping[int, Shard] | None = None,
                      defense: DefenseConfig | None = None,
                      report: DefenseReport | None = None) -> UnlearnOutcome:
    """Replay the archive, recalibrating every requesting client's updates.

    In each archived round where a requester took part, it retrains from the
    corrected global model on its shard minus the forget set (same batch
    shuffle as in training) and its stored update ``u`` becomes
    ``||u|| * ub / ||ub||``. Everyone else's stored update is reused.

    ``removal_rate`` > 0 adds an explicit forgetting step to the requester's
    update: ``removal_rate`` times the forget-set cross-entropy gradient
    (summed over the forget examples the archived model of that round
    classified correctly, divided by the forget-set size). It is applied in
    the requester's first ``removal_rounds`` participations (all of them when
    None). ``shards`` overrides the data registered by the clients.
    """
    if calibration_epochs < 1:
        raise ContractViolation("calibration_epochs must be at least 1")
    if removal_rate < 0:
        raise ContractViolation("removal_rate must be nonnegative")
    cfg = archive.config
    spec = archive.model_spec
    lr = cfg.learning_rate if calibration_lr is None else calibration_lr
    reqs = _as_requests(request)
    data = _client_shards(archive, dataset, partition, shards) if reqs else {}
    keep: dict[int, np.ndarray] = {}
    unmatched = 0
    for r in reqs:
        if r.client_id not in data:
            raise ContractViolation(f"client {r.client_id} is not part of the federation")
        if r.forget_features.shape[1] != spec.input_dim:
            raise ContractViolation("forget set feature_dim does not match the model")
        keep[r.client_id], miss = match_forget_rows(data[r.client_id], r)
        unmatched += miss
    forget = {r.client_id: r for r in reqs}
    data_only = dataclasses.replace(spec, l2_penalty=0.0)

    current = archive.initial
    seen = {c: 0 for c in forget}
    rounds_used = steps = zero_norm = removal_used = 0
    trace: list[tuple[int, int, float, float]] = []
    flagged_by_round: dict[int, list[int]] = {}
    for rec in archive.records:
        updates = dict(rec.client_updates)
        for cid in rec.participant_ids:
            if cid not in forget:
                continue
            stored = rec.client_updates[cid].values
            X, y = data[cid]
            ub, n_steps = sgd_steps(spec, current.values, X, y, calibration_epochs, cfg.batch_size,
                                    lr, cfg.momentum, client_rng(cfg.seed, rec.round_index, cid),
                                    keep[cid])
            steps += n_steps
            rounds_used += 1
            ub_norm = float(np.linalg.norm(ub))
            if ub_norm == 0.0:
                zero_norm += 1
                log.warning("round %d client %d: zero calibration update, stored update reused",
                            rec.round_index, cid)
                u = stored.copy()
            else:
                u = float(np.linalg.norm(stored)) * (ub / ub_norm)
            trace.append((rec.round_index, cid, float(np.linalg.norm(stored)), float(np.linalg.norm(u))))
            seen[cid] += 1
            if removal_rate > 0 and (removal_rounds is None or seen[cid] <= removal_rounds):
                r = forget[cid]
                learned = predict(spec, rec.global_before, r.forget_features) == r.forget_labels
                if learned.any():
                    _, g = loss_grad_flat(data_only, current.values, r.forget_features,
                                          r.forget_labels, learned.astype(np.float64))
                    u = u + removal_rate * g
                    removal_used += 1
            updates[cid] = current.replace(u)
        current, flagged = apply_round(cfg.aggregation, current, updates, rec.participant_ids,
                                       defense, rec.round_index, "unlearn", report)
        if flagged:
            flagged_by_round[rec.round_index] = flagged
    return UnlearnOutcome(current, rounds_used, steps, zero_norm, removal_used, unmatched,
                          trace, flagged_by_round)


def retrain_oracle(archive: HistoryArchive, dataset: Dataset | None, partition: Partition | None,
                   request: UnlearnRequest | Sequence[UnlearnRequest],
                   shards: Mapping[int, Shard] | None = None) -> UnlearnOutcome:
    """Retrain from scratch with identical config and seeds, minus the forget set.

    Every forget example must match a distinct row of the requester's shard.
    """
    reqs = _as_requests(request)
    if not reqs:
        raise UnresolvableRequestError("no unlearning request given")
    data = _client_shards(archive, dataset, partition, shards)
    for r in reqs:
        if r.client_id not in data:
            raise UnresolvableRequestError(f"client {r.client_id} has no shard")
        mask, miss = match_forget_rows(data[r.client_id], r)
        if miss:
            raise UnresolvableRequestError(
                f"{miss} forget example(s) not found in client {r.client_id}'s shard")
        X, y = data[r.client_id]
        data[r.client_id] = (X[mask], y[mask])
    cfg = archive.config
    final, retrained = run_federation(cfg, archive.model_spec, None, None, shards=data)
    steps = 0
    for rec in retrained.records:
        for cid in rec.participant_ids:
            n = len(data[cid][1])
            if n:
                steps += cfg.local_epochs * -(-n // min(cfg.batch_size, n))
    return UnlearnOutcome(final, 0, steps)
