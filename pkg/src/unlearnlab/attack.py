"""Malicious unlearning: pick influential samples, pull them onto a target, ask to forget them."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, Partition
from .defense import DefenseConfig, DefenseReport
from .errors import ContractViolation, EmptySelectionError
from .federation import HistoryArchive, Shard, shards_from_partition
from .influence import TargetSpec, craft_malicious_samples, influence_scores, select_influential
from .model import ParamVector
from .unlearning import UnlearnOutcome, UnlearnRequest, federaser_unlearn, retrain_oracle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    """``n`` candidates, ``p`` selected per attacker and target.

    ``epsilon_fraction`` scales each sample's budget relative to its distance
    from the target. ``mode`` is ``"isi"`` (influence ranking) or
    ``"random"`` (uniform sample of ``p`` shard rows, same perturbation).
    """

    n: int = 6
    p: int = 3
    epsilon_fraction: float = 1.0
    mode: str = "isi"
    num_attackers: int = 1
    targets: tuple[TargetSpec, ...] = ()
    damping: float = 0.01
    cg_iters: int = 100
    cg_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= self.n:
            raise ContractViolation("need 0 <= p <= n")
        if not 0.0 < self.epsilon_fraction <= 1.0:
            raise ContractViolation("epsilon_fraction must lie in (0, 1]")
        if self.mode not in ("isi", "random"):
            raise ContractViolation(f"unknown attack mode {self.mode!r}")
        if self.num_attackers < 1:
            raise ContractViolation("num_attackers must be positive")
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass
class AttackPlan:
    """One attacker's plan against one target.

    ``chosen_label`` is None in random mode, where no label constraint applies.
    """

    attacker: int
    target_id: int
    target_label: int
    mode: str
    influential_indices: list[int]
    chosen_label: int | None
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    deltas: np.ndarray
    epsilon: np.ndarray
    zeta: np.ndarray
    n_candidates: int
    p_selected: int
    alpha: float
    shortfall: int = 0
    skipped: list[int] = field(default_factory=list)
    influence: dict = field(default_factory=dict)

    def __post_init__(self):
        norms = np.linalg.norm(self.deltas, axis=1) if len(self.deltas) else np.zeros(0)
        if np.any(norms > self.epsilon + 1e-9):
            raise ContractViolation("a perturbation exceeds its budget")
        if self.chosen_label is not None and np.any(self.labels != self.chosen_label):
            raise ContractViolation("selected samples do not share the chosen label")

    def to_dict(self) -> dict:
        return {
            "attacker": self.attacker, "target_id": self.target_id,
            "target_label": self.target_label, "mode": self.mode,
            "influential_indices": list(self.influential_indices),
            "chosen_label": self.chosen_label,
            "deltas": self.deltas.tolist(), "epsilon": self.epsilon.tolist(),
            "zeta": self.zeta.tolist(), "labels": self.labels.tolist(),
            "n_candidates": self.n_candidates, "p_selected": self.p_selected,
            "alpha": self.alpha, "shortfall": self.shortfall, "skipped": self.skipped,
            "influence": self.influence,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        """Crafted samples, one row each, with budget columns and the features."""
        dim = self.perturbed.shape[1] if self.perturbed.ndim == 2 else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["attacker", "target_id", "index", "label", "delta_norm", "epsilon", "zeta"]
                       + [f"f{i}" for i in range(dim)])
            for k, idx in enumerate(self.influential_indices):
                w.writerow([self.attacker, self.target_id, idx, int(self.labels[k]),
                            repr(float(np.linalg.norm(self.deltas[k]))), repr(float(self.epsilon[k])),
                            repr(float(self.zeta[k]))] + [repr(float(v)) for v in self.perturbed[k]])


@dataclass
class AttackResult:
    unlearned: ParamVector
    client_views: dict[int, ParamVector]
    plans: list[AttackPlan]
    audit: list[dict]
    requests: list[UnlearnRequest]
    outcome: UnlearnOutcome | None

    def write_audit(self, path) -> None:
        Path(path).write_text(json.dumps(self.audit, indent=2))


def _empty_plan(attacker, target, mode, dim, shard_size, n, shortfall=0, influence=None) -> AttackPlan:
    z = np.zeros((0, dim))
    return AttackPlan(attacker, target.target_id, target.label, mode, [], None, z, z,
                      np.zeros(0, dtype=np.int64), z, np.zeros(0), np.zeros(0), n, 0, 0.0,
                      shortfall, [], influence or {})


def plan_attack(archive: HistoryArchive, shards: Mapping[int, Shard], config: AttackConfig,
                attackers: Sequence[int], audit: list[dict] | None = None,
                cache: dict | None = None) -> list[AttackPlan]:
    """Score, select and perturb for every (attacker, target) pair.

    Targets whose selection comes back empty are logged to ``audit`` and
    skipped. ``cache`` memoises influence reports across calls that share the
    same archive.
    """
    audit = [] if audit is None else audit
    spec = archive.model_spec
    trained = archive.final
    plans = []
    for target in config.targets:
        if target.owner_client in attackers:
            raise ContractViolation("a target must belong to a non-attacking client")
    for a in attackers:
        X, y = shards[a]
        for target in config.targets:
            info: dict = {}
            if config.p == 0:
                plans.append(_empty_plan(a, target, config.mode, X.shape[1], len(y), config.n))
                continue
            if config.mode == "isi":
                key = (a, target.target_id, np.asarray(target.features).tobytes(), int(target.label))
                rep = cache.get(key) if cache is not None else None
                if rep is None:
                    rep = influence_scores(spec, trained, X, y, target, config.damping,
                                           config.cg_iters, config.cg_tol, client_id=a)
                    if cache is not None:
                        cache[key] = rep
                info = {"damping": rep.damping, "cg_iters": rep.cg_iters,
                        "converged": rep.converged, "cg_residual": rep.cg_residual}
                try:
                    sel = select_influential(rep.scores, y, min(config.n, len(y)), min(config.p, len(y)))
                except EmptySelectionError as exc:
                    log.warning("attacker %d target %d: %s", a, target.target_id, exc)
                    audit.append({"event": "empty_selection", "attacker": a,
                                  "target_id": target.target_id, "detail": str(exc)})
                    continue
                indices, chosen, shortfall = sel.indices, sel.chosen_label, sel.shortfall
            else:
                rng = np.random.default_rng(np.random.SeedSequence(
                    [config.seed, a, max(target.target_id, 0), 0x5EED]))
                indices = sorted(int(i) for i in rng.choice(len(y), min(config.p, len(y)), replace=False))
                chosen, shortfall = None, max(0, config.p - len(indices))
            crafted = craft_malicious_samples(X[indices], target.features, config.epsilon_fraction)
            kept = [indices[k] for k in crafted.kept]
            skipped = [indices[k] for k in crafted.skipped]
            plan = AttackPlan(a, target.target_id, target.label, config.mode, kept, chosen,
                              X[kept].copy(), crafted.perturbed, y[kept].copy(), crafted.deltas,
                              crafted.epsilon, crafted.zeta, config.n, len(kept), len(kept) / len(y),
                              shortfall, skipped, info)
            plans.append(plan)
            audit.append({"event": "plan", "attacker": a, "target_id": target.target_id,
                          "target_label": int(target.label), "mode": config.mode,
                          "chosen_label": chosen,
                          "chosen_equals_target_label": None if chosen is None else chosen == target.label,
                          "indices": kept, "shortfall": shortfall, "skipped": skipped, **info})
    return plans


def register_and_request(shards: Mapping[int, Shard], plans: Sequence[AttackPlan], benign: bool = False,
                         mode: str = "federaser", audit: list[dict] | None = None
                         ) -> tuple[dict[int, Shard], list[UnlearnRequest]]:
    """Build the registered shards and unlearning requests for a set of plans.

    Malicious: each perturbed sample replaces its original row in the
    attacker's shard, and the perturbed samples form the forget set. Benign:
    the shard is untouched and the original samples form the forget set.
    When several plans pick the same row (multi-target union) the first
    plan's perturbation is kept.
    """
    audit = [] if audit is None else audit
    registered = {c: (X, y) for c, (X, y) in shards.items()}
    chosen: dict[int, dict[int, tuple[np.ndarray, int]]] = {}
    for plan in plans:
        rows = chosen.setdefault(plan.attacker, {})
        for k, idx in enumerate(plan.influential_indices):
            if idx in rows:
                audit.append({"event": "duplicate_row", "attacker": plan.attacker,
                              "target_id": plan.target_id, "index": idx})
                continue
            x = plan.original[k] if benign else plan.perturbed[k]
            rows[idx] = (x, int(plan.labels[k]))
    requests = []
    for a in sorted(chosen):
        rows = chosen[a]
        if not rows:
            continue
        order = sorted(rows)
        feats = np.stack([rows[i][0] for i in order])
        labels = np.array([rows[i][1] for i in order])
        if not benign:
            X, y = shards[a]
            X = X.copy()
            X[order] = feats
            registered[a] = (X, y)
        requests.append(UnlearnRequest(a, feats, labels, mode))
        audit.append({"event": "request", "client": a, "size": len(order), "benign": benign})
    return registered, requests


def unlearn_plans(archive: HistoryArchive, shards: Mapping[int, Shard], plans: Sequence[AttackPlan],
                  fu_mode: str = "federaser", benign: bool = False, audit: list[dict] | None = None,
                  calibration_epochs: int = 1, removal_rate: float = 0.0,
                  removal_rounds: int | None = None, defense: DefenseConfig | None = None,
                  report: DefenseReport | None = None) -> AttackResult:
    """Register the plans' samples, submit the requests and run the unlearning."""
    audit = [] if audit is None else audit
    registered, requests = register_and_request(shards, plans, benign, fu_mode, audit)
    if not requests:
        outcome = federaser_unlearn(archive, None, None, [], shards=registered, defense=defense,
                                    report=report)
    elif fu_mode == "federaser":
        outcome = federaser_unlearn(archive, None, None, requests, calibration_epochs,
                                    removal_rate=removal_rate, removal_rounds=removal_rounds,
                                    shards=registered, defense=defense, report=report)
    elif fu_mode == "retrain":
        outcome = retrain_oracle(archive, None, None, requests, shards=registered)
    else:
        raise ContractViolation(f"unknown unlearning mode {fu_mode!r}")
    audit.append({"event": "unlearned", "mode": fu_mode, "benign": benign, **outcome.summary()})
    views = {c: outcome.unlearned_global for c in range(archive.config.num_clients)}
    return AttackResult(outcome.unlearned_global, views, list(plans), audit, requests, outcome)


def execute_attack(archive: HistoryArchive, dataset: Dataset | None, partition: Partition | None,
                   config: AttackConfig, fu_mode: str = "federaser",
                   attackers: Sequence[int] | None = None, *,
                   shards: Mapping[int, Shard] | None = None, benign: bool = False,
                   calibration_epochs: int = 1, removal_rate: float = 0.0,
                   removal_rounds: int | None = None, defense: DefenseConfig | None = None,
                   report: DefenseReport | None = None, cache: dict | None = None) -> AttackResult:
    """Plan against every target in ``config``, then unlearn the union in one request per attacker.

    ``attackers`` defaults to the lowest ``config.num_attackers`` client ids.
    Every client sees the same unlearned global model.
    """
    if shards is None:
        if dataset is None or partition is None:
            raise ContractViolation("need either dataset and partition, or shards")
        shards = shards_from_partition(dataset, partition)
    ids = sorted(shards)
    attackers = list(attackers) if attackers is not None else ids[:config.num_attackers]
    if len(attackers) != config.num_attackers or not set(attackers) <= set(ids):
        raise ContractViolation("attackers must be num_attackers distinct federation clients")
    audit: list[dict] = []
    plans = plan_attack(archive, shards, config, attackers, audit, cache)
    return unlearn_plans(archive, shards, plans, fu_mode, benign, audit, calibration_epochs,
                         removal_rate, removal_rounds, defense, report)
