"""Influence scores, influential-sample selection and feature crafting."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptySelectionError
from .model import ModelSpec, ParamVector, inverse_hvp, loss_and_grad, per_example_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TargetSpec:
    features: np.ndarray
    label: int
    owner_client: int = -1
    target_id: int = -1


@dataclass
class InfluenceReport:
    """``scores[i]`` is the upweighting influence of shard example ``i`` on the target loss."""

    scores: np.ndarray
    evaluated_on: int
    damping: float
    cg_iters: int
    converged: bool
    cg_residual: float = 0.0

    @property
    def score_map(self) -> dict[int, float]:
        return {i: float(s) for i, s in enumerate(self.scores)}


def influence_scores(spec: ModelSpec, trained_params: ParamVector, shard_X, shard_y,
                     target: TargetSpec, damping: float = 0.01, cg_iters: int = 200,
                     tol: float = 1e-6, client_id: int = -1,
                     damping_growth: float = 3.0, max_damping: float = 10.0) -> InfluenceReport:
    """Score every shard example by ``-g_t^T (H + damping I)^-1 g_z``.

    The Hessian is that of the shard's training objective at ``trained_params``;
    ``g_t`` and ``g_z`` are single-example objective gradients. The inverse-HVP
    is solved once, then dotted with each per-example gradient.

    Away from a minimum an MLP Hessian is indefinite and CG breaks down; the
    damping is then multiplied by ``damping_growth`` (up to ``max_damping``)
    and the solve restarted. The report records the damping actually used.
    """
    shard_X = np.asarray(shard_X, dtype=np.float64)
    shard_y = np.asarray(shard_y, dtype=np.int64)
    if shard_y.size == 0:
        raise ContractViolation("attacker shard is empty")
    _, g_t = loss_and_grad(spec, trained_params, target.features, [target.label])
    cg = inverse_hvp(spec, trained_params, shard_X, shard_y, g_t, damping, cg_iters, tol)
    while cg.negative_curvature and damping * damping_growth <= max_damping * (1 + 1e-12):
        damping *= damping_growth
        cg = inverse_hvp(spec, trained_params, shard_X, shard_y, g_t, damping, cg_iters, tol)
    if not cg.converged:
        log.warning("inverse-HVP did not converge (residual %.2e after %d iterations)",
                    cg.relative_residual, cg.iterations)
    G = per_example_grads(spec, trained_params, shard_X, shard_y)
    scores = -(G @ cg.solution.values)
    return InfluenceReport(scores, client_id, damping, cg.iterations, cg.converged, cg.relative_residual)


@dataclass
class Selection:
    indices: list[int]
    chosen_label: int
    candidates: list[int]
    shortfall: int = 0


def select_influential(scores, labels, n: int, p: int) -> Selection:
    """Pick the ``n`` most negative scores, then up to ``p`` of them sharing the plurality label.

    Ordering is most-negative first with ties broken by lower index; the
    plurality label breaks ties toward the smaller label. Only negative scores
    are candidates.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 <= p <= n <= scores.size:
        raise ContractViolation("need 0 <= p <= n <= shard size")
    negative = [i for i in np.lexsort((np.arange(scores.size), scores)) if scores[i] < 0]
    if not negative:
        raise EmptySelectionError("no shard example has a negative influence score")
    candidates = [int(i) for i in negative[:n]]
    counts = Counter(int(labels[i]) for i in candidates)
    top = max(counts.values()) if counts else 0
    chosen = min(lbl for lbl, c in counts.items() if c == top) if counts else int(labels[negative[0]])
    same = [i for i in candidates if labels[i] == chosen][:p]
    return Selection(same, chosen, candidates, max(0, p - len(same)))


@dataclass
class CraftResult:
    perturbed: np.ndarray
    deltas: np.ndarray
    zeta: np.ndarray
    epsilon: np.ndarray
    kept: list[int] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def craft_malicious_samples(X_inf, x_target, epsilon_fraction: float,
                            lower: float = 0.0, upper: float = 1.0) -> CraftResult:
    """Move each selected sample toward the target by ``epsilon_fraction`` of the gap.

    ``x' = x - delta`` with ``delta = fraction * (x - x_t)``, clamped to
    ``[lower, upper]`` (delta recomputed after clamping). Samples identical to
    the target have no direction and are skipped. ``epsilon`` holds each
    sample's budget ``fraction * ||x - x_t||``.
    """
    if not 0.0 < epsilon_fraction <= 1.0:
        raise ContractViolation("epsilon_fraction must lie in (0, 1]")
    X_inf = np.atleast_2d(np.asarray(X_inf, dtype=np.float64))
    x_t = np.asarray(x_target, dtype=np.float64)
    out_x, out_d, zeta, eps, kept, skipped = [], [], [], [], [], []
    for j, x in enumerate(X_inf):
        d = x - x_t
        dist = float(np.linalg.norm(d))
        if dist == 0.0:
            log.warning("sample %d coincides with the target; skipped", j)
            skipped.append(j)
            continue
        x_new = np.clip(x - epsilon_fraction * d, lower, upper)
        out_x.append(x_new)
        out_d.append(x - x_new)
        zeta.append(float(np.linalg.norm(x_new - x_t)))
        eps.append(epsilon_fraction * dist)
        kept.append(j)
    dim = x_t.size
    return CraftResult(np.array(out_x).reshape(-1, dim), np.array(out_d).reshape(-1, dim),
                       np.array(zeta), np.array(eps), kept, skipped)
