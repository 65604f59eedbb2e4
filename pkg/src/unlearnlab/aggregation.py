"""Server-side aggregation rules over client update vectors."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError
from .model import ParamVector

_RULE_RE = re.compile(r"^\s*(fedavg|median|trimmed_mean|krum)\s*(?:\(\s*(\d+)\s*\))?\s*$")


@dataclass(frozen=True)
class AggregationRule:
    """``fedavg``, ``median``, ``trimmed_mean(k)`` or ``krum(m)``."""

    name: str
    param: int = 0

    @classmethod
    def parse(cls, text: "str | AggregationRule") -> "AggregationRule":
        if isinstance(text, AggregationRule):
            return text
        m = _RULE_RE.match(text.lower())
        if not m:
            raise AggregationError(f"unknown aggregation rule {text!r}")
        name, arg = m.group(1), m.group(2)
        if name in ("trimmed_mean", "krum"):
            return cls(name, int(arg) if arg is not None else 1)
        if arg is not None:
            raise AggregationError(f"{name} takes no parameter")
        return cls(name)

    def __str__(self) -> str:
        return f"{self.name}({self.param})" if self.name in ("trimmed_mean", "krum") else self.name

    def check(self, n: int) -> None:
        if n < 1:
            raise AggregationError("no updates to aggregate")
        if self.name == "trimmed_mean" and not 2 * self.param < n:
            raise AggregationError(f"trimmed_mean({self.param}) needs more than {2 * self.param} updates")
        if self.name == "krum" and n - self.param - 2 < 1:
            raise AggregationError(f"krum({self.param}) needs at least {self.param + 3} updates")


def krum_scores(U: np.ndarray, m: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - m - 2`` nearest other rows."""
    n = U.shape[0]
    sq = np.sum(U * U, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (U @ U.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    keep = n - m - 2
    return np.sort(d2, axis=1)[:, :keep].sum(axis=1)


def aggregate_array(rule: "str | AggregationRule", U: np.ndarray) -> tuple[np.ndarray, int | None]:
    """Aggregate stacked updates ``U`` of shape ``(clients, params)``.

    Returns the aggregate and, for Krum, the row index that was selected.
    """
    rule = AggregationRule.parse(rule)
    U = np.asarray(U, dtype=np.float64)
    rule.check(U.shape[0])
    if rule.name == "krum":
        idx = int(np.argmin(krum_scores(U, rule.param)))
        return U[idx].copy(), idx
    if np.all(U == U[0]):
        return U[0].copy(), None
    if rule.name == "fedavg":
        return _row_mean(U), None
    if rule.name == "median":
        return np.median(U, axis=0), None
    k = rule.param
    S = np.sort(U, axis=0)
    return _row_mean(S[k:U.shape[0] - k]), None


def _row_mean(U: np.ndarray) -> np.ndarray:
    """Mean accumulated row by row, so rounding does not depend on array layout."""
    acc = U[0].copy()
    for row in U[1:]:
        acc += row
    return acc / U.shape[0]


def aggregate(rule: "str | AggregationRule", updates: Sequence[ParamVector]) -> ParamVector:
    if not updates:
        raise AggregationError("no updates to aggregate")
    manifest = updates[0].manifest
    if any(u.manifest != manifest for u in updates):
        raise AggregationError("updates have different manifests")
    agg, _ = aggregate_array(rule, np.stack([u.values for u in updates]))
    return ParamVector(agg, manifest)
