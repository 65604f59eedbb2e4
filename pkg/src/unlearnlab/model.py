"""Small differentiable classifiers on flat parameter vectors.

Two model families share one code path: multinomial logistic regression
(no hidden layers) and a fully connected MLP. Parameters are stored as one
flat float64 vector plus a manifest of ``(layer_name, shape)`` entries, which
keeps aggregation, norms and Hessian-vector products simple vector algebra.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractViolation

Manifest = tuple[tuple[str, tuple[int, ...]], ...]


def manifest_size(manifest: Manifest) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in manifest))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flattened parameters with their layer-shape manifest."""

    values: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ContractViolation("ParamVector values must be one-dimensional")
        if manifest_size(self.manifest) != values.size:
            raise ContractViolation(
                f"manifest describes {manifest_size(self.manifest)} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ContractViolation("ParamVector contains NaN or Inf")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamVector) and self.manifest == other.manifest
                and np.array_equal(self.values, other.values))

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.manifest)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.manifest)

    def layers(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, view)`` pairs reshaped to each layer's shape."""
        offset = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            yield name, self.values[offset:offset + size].reshape(shape)
            offset += size

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def check_compatible(self, other: "ParamVector") -> None:
        if self.manifest != other.manifest:
            raise ContractViolation("parameter manifests differ")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    class_count: int
    hidden_layers: tuple[int, ...] = ()
    activation: str = "relu"
    l2_penalty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1:
            raise ContractViolation("input_dim must be positive")
        if self.class_count < 2:
            raise ContractViolation("class_count must be at least 2")
        if any(h < 1 for h in self.hidden_layers):
            raise ContractViolation("hidden layer widths must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.l2_penalty < 0:
            raise ContractViolation("l2_penalty must be nonnegative")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.class_count]

    @property
    def manifest(self) -> Manifest:
        entries = []
        widths = self.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            entries.append((f"W{i}", (fan_in, fan_out)))
            entries.append((f"b{i}", (fan_out,)))
        return tuple(entries)

    @property
    def param_count(self) -> int:
        return manifest_size(self.manifest)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "class_count": self.class_count,
                "hidden_layers": list(self.hidden_layers), "activation": self.activation,
                "l2_penalty": self.l2_penalty}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(int(d["input_dim"]), int(d["class_count"]), tuple(d.get("hidden_layers", ())),
                   d.get("activation", "relu"), float(d.get("l2_penalty", 0.0)))


@dataclass(frozen=True)
class LossReport:
    loss: float
    correct: bool


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, from a seeded generator."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in spec.manifest:
        if name.startswith("W"):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            chunks.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            chunks.append(np.zeros(shape))
    return ParamVector(np.concatenate(chunks), spec.manifest)


def _unpack(spec: ModelSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    widths = spec.widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = w[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _as_batch(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ContractViolation(f"expected features of length {spec.input_dim}, got shape {X.shape}")
    return X


def _check_params(spec: ModelSpec, params: ParamVector) -> np.ndarray:
    if params.manifest != spec.manifest:
        raise ContractViolation("parameters do not match the model spec")
    return params.values


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(spec: ModelSpec, w: np.ndarray, X: np.ndarray):
    """Return (activations per layer incl. input, pre-activations, probs)."""
    layers = _unpack(spec, w)
    acts = [X]
    pre = []
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
            acts.append(h)
    return acts, pre, _softmax(pre[-1])


def forward(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    """Class probabilities for one feature vector (1-D result) or a batch (2-D)."""
    w = _check_params(spec, params)
    single = np.ndim(x) == 1
    X = _as_batch(spec, x)
    probs = _forward(spec, w, X)[2]
    return probs[0] if single else probs


def predict(spec: ModelSpec, params: ParamVector, X) -> np.ndarray:
    """Argmax labels; ties go to the lower class index."""
    return np.argmax(forward(spec, params, _as_batch(spec, X)), axis=1)


def _check_labels(spec: ModelSpec, y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ContractViolation("features and labels differ in length")
    if n == 0:
        raise ContractViolation("empty batch")
    if y.min() < 0 or y.max() >= spec.class_count:
        raise ContractViolation("label out of range")
    return y


def loss_grad_flat(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray,
                   weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Objective and gradient on raw arrays (no validation; hot path).

    The objective is ``sum_i weights_i * CE_i / n + l2/2 * ||w||^2`` with unit
    weights by default, i.e. the mean cross-entropy plus an L2 term.
    """
    n = X.shape[0]
    acts, pre, probs = _forward(spec, w, X)
    rows = np.arange(n)
    ce = -np.log(np.clip(probs[rows, y], 1e-300, None))
    coef = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64) / n
    loss = float(coef @ ce) + 0.5 * spec.l2_penalty * float(w @ w)

    delta = probs.copy()
    delta[rows, y] -= 1.0
    delta *= coef[:, None]
    layers = _unpack(spec, w)
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        grads[2 * i] = (acts[i].T @ delta).ravel()
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            back = delta @ layers[i][0].T
            if spec.activation == "relu":
                delta = back * (pre[i - 1] > 0)
            else:
                delta = back * (1.0 - acts[i] ** 2)
    grad = np.concatenate(grads)
    if spec.l2_penalty:
        grad = grad + spec.l2_penalty * w
    return loss, grad


def loss_and_grad(spec: ModelSpec, params: ParamVector, X, y) -> tuple[float, ParamVector]:
    """Mean cross-entropy plus L2 term over a nonempty batch, and its gradient."""
    w = _check_params(spec, params)
    X = _as_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])
    loss, grad = loss_grad_flat(spec, w, X, y)
    return loss, ParamVector(grad, params.manifest)


def loss_report(spec: ModelSpec, params: ParamVector, x, y: int) -> LossReport:
    loss, _ = loss_and_grad(spec, params, x, [y])
    return LossReport(loss, bool(predict(spec, params, x)[0] == y))


def per_example_grads(spec: ModelSpec, params: ParamVector, X, y) -> np.ndarray:
    """Row ``i`` is the gradient of the single-example objective at ``(X[i], y[i])``."""
    w = _check_params(spec, params)
    X = _as_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])
    n = X.shape[0]
    acts, pre, probs = _forward(spec, w, X)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    layers = _unpack(spec, w)
    blocks: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        blocks[2 * i] = (acts[i][:, :, None] * delta[:, None, :]).reshape(n, -1)
        blocks[2 * i + 1] = delta
        if i > 0:
            back = delta @ layers[i][0].T
            delta = back * (pre[i - 1] > 0) if spec.activation == "relu" else back * (1.0 - acts[i] ** 2)
    out = np.concatenate(blocks, axis=1)
    if spec.l2_penalty:
        out += spec.l2_penalty * w[None, :]
    return out


def hvp(spec: ModelSpec, params: ParamVector, X, y, v: ParamVector) -> ParamVector:
    """Hessian-vector product by central differences of the batch gradient.

    Step ``h = 1e-3 / (1 + ||v||)``.
    """
    w = _check_params(spec, params)
    params.check_compatible(v)
    X = _as_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])
    return ParamVector(_hvp_flat(spec, w, X, y, v.values), params.manifest)


def _hvp_flat(spec, w, X, y, v):
    vn = float(np.linalg.norm(v))
    if vn == 0.0:
        return np.zeros_like(w)
    h = 1e-3 / (1.0 + vn)
    _, gp = loss_grad_flat(spec, w + h * v, X, y)
    _, gm = loss_grad_flat(spec, w - h * v, X, y)
    return (gp - gm) / (2.0 * h)


@dataclass
class CGResult:
    solution: ParamVector
    converged: bool
    iterations: int
    relative_residual: float
    negative_curvature: bool = False
    history: list[float] = field(default_factory=list, repr=False)


def inverse_hvp(spec: ModelSpec, params: ParamVector, X, y, b: ParamVector,
                damping: float = 0.01, max_iters: int = 200, tol: float = 1e-6) -> CGResult:
    """Solve ``(H + damping I) x = b`` with conjugate gradients.

    ``H`` is the Hessian of the batch objective at ``params``, applied through
    :func:`hvp`. On failure to reach ``tol`` (or on a non-positive curvature
    step) the iterate with the smallest residual is returned with
    ``converged=False``.
    """
    if damping <= 0:
        raise ContractViolation("damping must be positive")
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    w = _check_params(spec, params)
    params.check_compatible(b)
    X = _as_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])

    rhs = b.values
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        return CGResult(b.zeros_like(), True, 0, 0.0)

    def apply(v):
        return _hvp_flat(spec, w, X, y, v) + damping * v

    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    best_x, best_res = x.copy(), 1.0
    history = [1.0]
    converged = False
    negative = False
    it = 0
    for it in range(1, max_iters + 1):
        Ap = apply(p)
        curv = float(p @ Ap)
        if curv <= 0.0:
            negative = True
            it -= 1
            break
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        rel = np.sqrt(rs_new) / bnorm
        history.append(rel)
        if rel < best_res:
            best_x, best_res = x.copy(), rel
        if rel <= tol:
            converged = True
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(ParamVector(best_x, params.manifest), converged, it, best_res, negative, history)


def dense_hessian(spec: ModelSpec, params: ParamVector, X, y) -> np.ndarray:
    """Full Hessian by finite differences of the gradient, one column per parameter.

    Only meant for tiny models (tests, diagnostics).
    """
    w = _check_params(spec, params)
    X = _as_batch(spec, X)
    y = _check_labels(spec, y, X.shape[0])
    cols = [_hvp_flat(spec, w, X, y, e) for e in np.eye(w.size)]
    H = np.stack(cols, axis=1)
    return 0.5 * (H + H.T)


def accuracy(spec: ModelSpec, params: ParamVector, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ContractViolation("empty evaluation set")
    return float(np.mean(predict(spec, params, X) == y))


def flatten_layers(arrays: Sequence[np.ndarray], manifest: Manifest) -> ParamVector:
    return ParamVector(np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]), manifest)
