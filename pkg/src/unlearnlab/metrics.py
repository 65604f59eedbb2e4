"""Attack success and accuracy metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ContractViolation
from .influence import TargetSpec
from .model import ModelSpec, ParamVector, accuracy, predict


@dataclass(frozen=True)
class TargetOutcome:
    target_id: int
    pre_label: int
    post_label: int
    success: bool
    acc_unlearned: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _per_target(unlearned, n: int) -> list[ParamVector]:
    if isinstance(unlearned, ParamVector):
        return [unlearned] * n
    unlearned = list(unlearned)
    if len(unlearned) != n:
        raise ContractViolation("need one unlearned model per target")
    return unlearned


def target_outcomes(spec: ModelSpec, original: ParamVector,
                    unlearned: ParamVector | Sequence[ParamVector],
                    targets: Sequence[TargetSpec]) -> list[TargetOutcome]:
    """Pre/post predictions for each target; success means the post prediction is not y_t."""
    models = _per_target(unlearned, len(targets))
    out = []
    for t, w in zip(targets, models):
        pre = int(predict(spec, original, t.features)[0])
        post = int(predict(spec, w, t.features)[0])
        out.append(TargetOutcome(t.target_id, pre, post, post != t.label))
    return out


def compute_asr(spec: ModelSpec, unlearned: ParamVector | Sequence[ParamVector],
                targets: Sequence[TargetSpec]) -> float:
    """Fraction of targets whose unlearned-model prediction differs from their label.

    ``unlearned`` is either one model shared by all targets or one model per target.
    """
    if len(targets) == 0:
        raise ContractViolation("ASR needs at least one target")
    models = _per_target(unlearned, len(targets))
    hits = sum(int(predict(spec, w, t.features)[0] != t.label) for t, w in zip(targets, models))
    return hits / len(targets)


def asr_from_outcomes(outcomes: Sequence[TargetOutcome | dict]) -> float:
    if len(outcomes) == 0:
        raise ContractViolation("ASR needs at least one target")
    flags = [o["success"] if isinstance(o, dict) else o.success for o in outcomes]
    return sum(bool(f) for f in flags) / len(flags)


def compute_accuracy(spec: ModelSpec, params: ParamVector, test: Dataset) -> float:
    """Fraction of test examples whose argmax prediction (lower index on ties) matches."""
    if len(test) == 0:
        raise ContractViolation("test set is empty")
    return accuracy(spec, params, test.X, test.y)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractViolation("no values to summarise")
    return float(arr.mean()), float(arr.std())
