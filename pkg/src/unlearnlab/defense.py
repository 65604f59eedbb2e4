"""Gradient-norm outlier defense.

Within one aggregation round, every participant's update is summarised by the
sum of its per-layer l2 norms. Clients whose summary lies above an
interquartile-range fence are flagged and their update is multiplied by a
constant ``lam`` before aggregation.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractViolation
from .model import Manifest, ParamVector

_TUKEY_RE = re.compile(r"^tukey\s*(?:\(\s*([0-9.eE+-]+)\s*\))?$")


@dataclass(frozen=True)
class DefenseConfig:
    """``fence`` is ``"upper_quartile"`` or ``"tukey(k)"``.

    ``active_rounds`` is a half-open ``(start, stop)`` range of round indices
    (``None`` means every round); ``phases`` selects where the defense runs:
    ``"train"`` (original federation) and/or ``"unlearn"`` (unlearning replay).
    """

    lam: float = 0.1
    fence: str = "tukey(1.5)"
    active_rounds: tuple[int, int] | None = None
    phases: tuple[str, ...] = ("unlearn",)

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ContractViolation("lambda must lie in (0, 1]")
        self.fence_k  # validates
        bad = set(self.phases) - {"train", "unlearn"}
        if bad:
            raise ContractViolation(f"unknown defense phases {sorted(bad)}")

    @property
    def fence_k(self) -> float | None:
        """Tukey multiplier, or None for the plain upper-quartile rule."""
        f = self.fence.strip().lower()
        if f == "upper_quartile":
            return None
        m = _TUKEY_RE.match(f)
        if not m:
            raise ContractViolation(f"unknown fence {self.fence!r}")
        k = float(m.group(1)) if m.group(1) else 1.5
        if k < 0:
            raise ContractViolation("tukey k must be nonnegative")
        return k

    def is_active(self, round_index: int | None, phase: str) -> bool:
        if phase not in self.phases:
            return False
        if self.active_rounds is None or round_index is None:
            return True
        start, stop = self.active_rounds
        return start <= round_index < stop

    def to_dict(self) -> dict:
        return {"lam": self.lam, "fence": self.fence,
                "active_rounds": list(self.active_rounds) if self.active_rounds else None,
                "phases": list(self.phases)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DefenseConfig":
        ar = d.get("active_rounds")
        return cls(float(d.get("lam", 0.1)), d.get("fence", "tukey(1.5)"),
                   tuple(ar) if ar else None, tuple(d.get("phases", ("unlearn",))))


def gradient_norm(update: ParamVector | np.ndarray, manifest: Manifest | None = None) -> float:
    """Sum over layers of the l2 norm of each layer's slice."""
    if isinstance(update, ParamVector):
        if manifest is not None and manifest != update.manifest:
            raise ContractViolation("update manifest does not match")
        values, manifest = update.values, update.manifest
    else:
        values = np.asarray(update, dtype=np.float64)
        if manifest is None:
            raise ContractViolation("a manifest is required for raw arrays")
    total = 0.0
    offset = 0
    for _, shape in manifest:
        size = int(np.prod(shape))
        total += float(np.linalg.norm(values[offset:offset + size]))
        offset += size
    if offset != values.size:
        raise ContractViolation("update length does not match manifest")
    return total


def flag_outliers(norms: Mapping[int, float], fence: str = "tukey(1.5)") -> set[int]:
    """Clients whose norm exceeds the fence. Fewer than four norms flags nobody."""
    if len(norms) < 4:
        return set()
    k = DefenseConfig(fence=fence).fence_k
    vals = np.array(sorted(norms.values()), dtype=np.float64)
    q1, q3 = np.quantile(vals, [0.25, 0.75])
    limit = q3 if k is None else q3 + k * (q3 - q1)
    return {cid for cid, v in norms.items() if v > limit}


def defend_round(updates: Mapping[int, ParamVector], manifest: Manifest, config: DefenseConfig,
                 round_index: int | None = None, phase: str = "unlearn"
                 ) -> tuple[dict[int, ParamVector], set[int], dict[int, float]]:
    """Scale flagged clients' updates by ``config.lam``.

    Returns ``(adjusted updates, flagged ids, norms)``; inactive rounds pass
    through untouched with nothing flagged.
    """
    norms = {cid: gradient_norm(u, manifest) for cid, u in updates.items()}
    if not config.is_active(round_index, phase):
        return dict(updates), set(), norms
    flagged = flag_outliers(norms, config.fence)
    adjusted = {cid: (u.replace(u.values * config.lam) if cid in flagged else u)
                for cid, u in updates.items()}
    return adjusted, flagged, norms


@dataclass
class DefenseReport:
    lam: float
    fence: str
    flags: dict[int, list[int]] = field(default_factory=dict)
    norms: dict[int, dict[int, float]] = field(default_factory=dict)

    def record(self, round_index: int, norms: Mapping[int, float], flagged: set[int]) -> None:
        self.norms[round_index] = {int(c): float(v) for c, v in norms.items()}
        self.flags[round_index] = sorted(int(c) for c in flagged)

    def to_dict(self) -> dict:
        return {"lam": self.lam, "fence": self.fence,
                "flags": {str(r): f for r, f in sorted(self.flags.items())},
                "norms": {str(r): {str(c): v for c, v in sorted(n.items())}
                          for r, n in sorted(self.norms.items())}}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_norms_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "client", "norm", "flagged"])
            for r in sorted(self.norms):
                flagged = set(self.flags.get(r, ()))
                for c in sorted(self.norms[r]):
                    w.writerow([r, c, repr(self.norms[r][c]), int(c in flagged)])
