"""Experiment configuration and the train / unlearn / attack / defend / evaluate pipeline."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
import typing
from contextlib import contextmanager
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .attack import AttackConfig, AttackPlan, plan_attack, unlearn_plans
from .data import (Dataset, Partition, load_csv, load_idx, load_mnist_subset, make_blobs,
                   make_purchase_like, partition)
from .defense import DefenseConfig, DefenseReport
from .errors import ContractViolation, LabError, StageError
from .federation import FederationConfig, HistoryArchive, run_federation, shards_from_partition
from .influence import TargetSpec
from .metrics import TargetOutcome, asr_from_outcomes, compute_accuracy, target_outcomes
from .model import ModelSpec, ParamVector, predict

log = logging.getLogger(__name__)

SEED_ENV = "FEDMUA_SEED"


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class DataConfig:
    """``source`` is mnist, blobs, purchase, idx or csv.

    File-backed sources read the ``*_path`` keys; ``n_train``/``n_test`` cap
    (idx, csv) or set (mnist, blobs, purchase) the split sizes.
    """

    source: str = "mnist"
    n_train: int = 2000
    n_test: int = 1000
    partition: str = "iid"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    label_column: str = "label"
    class_count: int = 2
    feature_dim: int = 2
    spread: float = 0.08

    def __post_init__(self):
        if self.source not in ("mnist", "blobs", "purchase", "idx", "csv"):
            raise ContractViolation(f"unknown data source {self.source!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ContractViolation("n_train and n_test must be positive")
        needed = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
                  "csv": ("train_csv", "test_csv")}.get(self.source, ())
        for key in needed:
            path = getattr(self, key)
            if not path:
                raise ContractViolation(f"data source {self.source} needs {key}")
            if not Path(path).exists():
                raise ContractViolation(f"{key} {path!r} does not exist")


@dataclass(frozen=True)
class ModelConfig:
    hidden_layers: tuple[int, ...] = (32,)
    activation: str = "relu"
    l2_penalty: float = 1e-3

    def spec(self, input_dim: int, class_count: int) -> ModelSpec:
        return ModelSpec(input_dim, class_count, self.hidden_layers, self.activation, self.l2_penalty)


@dataclass(frozen=True)
class AttackSettings:
    """``p`` per attacker is ``round(ratio * n_train / num_attackers)`` unless given; ``n`` defaults to ``2p``."""

    enabled: bool = True
    mode: str = "isi"
    ratio: float = 0.003
    p: int | None = None
    n: int | None = None
    epsilon_fraction: float = 1.0
    num_attackers: int = 2
    target_count: int = 20
    multi_target: bool = False
    damping: float = 0.01
    cg_iters: int = 100
    cg_tol: float = 1e-5

    def __post_init__(self):
        if self.mode not in ("isi", "random"):
            raise ContractViolation(f"unknown attack mode {self.mode!r}")
        if self.ratio < 0 or self.target_count < 1 or self.num_attackers < 1:
            raise ContractViolation("ratio, target_count or num_attackers out of range")
        if not 0.0 < self.epsilon_fraction <= 1.0:
            raise ContractViolation("epsilon_fraction must lie in (0, 1]")

    def resolve(self, n_train: int) -> tuple[int, int]:
        p = self.p if self.p is not None else int(round(self.ratio * n_train / self.num_attackers))
        n = self.n if self.n is not None else 2 * p
        if not 0 <= p <= n:
            raise ContractViolation("need 0 <= p <= n")
        return n, p


@dataclass(frozen=True)
class UnlearnSettings:
    calibration_epochs: int = 1
    removal_rate: float = 0.5
    removal_rounds: int | None = 3


@dataclass(frozen=True)
class DefenseSettings:
    enabled: bool = False
    lam: float = 0.1
    fence: str = "tukey(1.5)"
    active_rounds: tuple[int, ...] | None = None
    phases: tuple[str, ...] = ("unlearn",)

    def build(self) -> DefenseConfig | None:
        if not self.enabled:
            return None
        ar = tuple(self.active_rounds) if self.active_rounds else None
        if ar is not None and len(ar) != 2:
            raise ContractViolation("active_rounds takes two integers: start, stop")
        return DefenseConfig(self.lam, self.fence, ar, tuple(self.phases))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    repetitions: int = 1
    output_dir: str = "runs"
    fu_mode: str = "federaser"
    save_models: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=lambda: FederationConfig(
        10, 10, 30, 2, 32, 0.05, 0.9, "fedavg", 0))
    attack: AttackSettings = field(default_factory=AttackSettings)
    unlearn: UnlearnSettings = field(default_factory=UnlearnSettings)
    defense: DefenseSettings = field(default_factory=DefenseSettings)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ContractViolation("repetitions must be positive")
        if self.fu_mode not in ("federaser", "retrain"):
            raise ContractViolation(f"unknown unlearning mode {self.fu_mode!r}")
        if self.attack.num_attackers >= self.federation.num_clients:
            raise ContractViolation("need at least one non-attacking client")
        self.defense.build()
        if self.federation.seed != self.seed:
            object.__setattr__(self, "federation", dataclasses.replace(self.federation, seed=self.seed))

    SECTIONS = ("data", "model", "federation", "attack", "unlearn", "defense")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("name", "seed", "repetitions", "output_dir",
                                             "fu_mode", "save_models")}
        for s in self.SECTIONS:
            out[s] = {f.name: _plain(getattr(getattr(self, s), f.name))
                      for f in dataclasses.fields(getattr(self, s))}
        return out

    @property
    def digest(self) -> str:
        """Hash of every field that can change results (name, output_dir and repetitions excluded)."""
        d = self.to_dict()
        for k in ("name", "output_dir", "repetitions", "save_models"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply ``{"section.key" or "key": value}`` overrides; string values are parsed."""
        d = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.rpartition(".")
            target = d[section] if section else d
            if name not in target:
                raise ContractViolation(f"unknown config key {key!r}")
            target[name] = value
        return ExperimentConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        top = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        hints = typing.get_type_hints(cls)
        for k, v in d.items():
            if k not in top:
                raise ContractViolation(f"unknown config key {k!r}")
            if k in cls.SECTIONS:
                sub_cls = _SECTION_TYPES[k]
                kwargs[k] = _build_section(sub_cls, v)
            else:
                kwargs[k] = _coerce(v, hints[k], k)
        return cls(**kwargs)

    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.repetitions)]

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, repetitions=1)

    def write_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        d = self.to_dict()
        cp["experiment"] = {k: _ini_value(d[k]) for k in d if k not in self.SECTIONS}
        for s in self.SECTIONS:
            cp[s] = {k: _ini_value(v) for k, v in d[s].items()}
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)


_SECTION_TYPES = {"data": DataConfig, "model": ModelConfig, "federation": FederationConfig,
                  "attack": AttackSettings, "unlearn": UnlearnSettings, "defense": DefenseSettings}


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _ini_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(value, hint, key: str):
    """Convert ``value`` (often an INI string) to the annotated type ``hint``."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
            return None
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if isinstance(value, str):
            value = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(_coerce(v, args[0], key) for v in value)
    try:
        if hint is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ContractViolation(f"config key {key!r}: cannot read {value!r}") from None


def _build_section(cls, values: Mapping[str, Any]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in names:
            raise ContractViolation(f"unknown key {k!r} in section for {cls.__name__}")
        kwargs[k] = _coerce(v, hints[k], k)
    return cls(**kwargs)


def load_config(path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read an INI experiment file. ``FEDMUA_SEED`` in the environment overrides ``seed``."""
    env = os.environ if env is None else env
    path = Path(path)
    if not path.exists():
        raise ContractViolation(f"config file {str(path)!r} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read(path, encoding="utf-8")
    d: dict[str, Any] = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    for s in cp.sections():
        if s == "experiment":
            continue
        if s not in ExperimentConfig.SECTIONS:
            raise ContractViolation(f"unknown config section [{s}]")
        d[s] = dict(cp[s])
    if SEED_ENV in env and env[SEED_ENV].strip():
        d["seed"] = env[SEED_ENV]
    d.get("federation", {}).pop("seed", None)
    return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ bundle

@dataclass
class MetricsBundle:
    asr: float
    asr_b: float
    acc_g: float
    acc_g_unlearned: float
    outcomes: list[TargetOutcome]
    benign_outcomes: list[TargetOutcome]
    seed: int
    config_digest: str
    group: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    defense: dict | None = None

    def __post_init__(self):
        for name in ("asr", "asr_b", "acc_g", "acc_g_unlearned"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"asr": self.asr, "asr_b": self.asr_b, "acc_g": self.acc_g,
                "acc_g_unlearned": self.acc_g_unlearned,
                "outcomes": [o.to_dict() for o in self.outcomes],
                "benign_outcomes": [o.to_dict() for o in self.benign_outcomes],
                "seed": self.seed, "config_digest": self.config_digest, "group": self.group,
                "attack": self.attack, "defense": self.defense}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsBundle":
        return cls(d["asr"], d["asr_b"], d["acc_g"], d["acc_g_unlearned"],
                   [TargetOutcome(**o) for o in d["outcomes"]],
                   [TargetOutcome(**o) for o in d["benign_outcomes"]],
                   d["seed"], d["config_digest"], d.get("group", {}), d.get("attack", {}),
                   d.get("defense"))


# ---------------------------------------------------------------- pipeline

@contextmanager
def _stage(name: str):
    """Re-raise library, value and I/O errors as a StageError tagged ``name``."""
    try:
        yield
    except StageError:
        raise
    except (LabError, ValueError, OSError, ImportError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def load_data(config: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    src = config.source
    if src == "mnist":
        return load_mnist_subset(config.n_train, config.n_test, seed)
    if src in ("blobs", "purchase"):
        total = config.n_train + config.n_test
        ds = (make_blobs(total, config.class_count, config.feature_dim, config.spread, seed)
              if src == "blobs" else make_purchase_like(total, config.feature_dim, seed))
        idx = np.random.default_rng(seed).permutation(total)
        return ds.subset(idx[:config.n_train], ds.name), ds.subset(idx[config.n_train:], ds.name + "_test")
    if src == "idx":
        tr = load_idx(config.train_images, config.train_labels, "mnist")
        te = load_idx(config.test_images, config.test_labels, "mnist_test")
    else:
        tr = load_csv(config.train_csv, config.label_column)
        te = load_csv(config.test_csv, config.label_column)
        k = max(tr.class_count, te.class_count)
        tr, te = (Dataset(tr.X, tr.y, k, tr.name), Dataset(te.X, te.y, k, te.name))
    rng = np.random.default_rng(seed)
    if len(tr) > config.n_train:
        tr = tr.subset(np.sort(rng.choice(len(tr), config.n_train, replace=False)))
    if len(te) > config.n_test:
        te = te.subset(np.sort(rng.choice(len(te), config.n_test, replace=False)))
    return tr, te


def choose_targets(spec: ModelSpec, params: ParamVector, test: Dataset, count: int,
                   attackers: list[int], num_clients: int, seed: int) -> list[TargetSpec]:
    """Seeded sample of test examples the model currently classifies correctly.

    Each target is assigned to a random non-attacking owner client.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A46]))
    correct = np.flatnonzero(predict(spec, params, test.X) == test.y)
    if correct.size < count:
        raise ContractViolation(f"only {correct.size} correctly classified test examples")
    picked = rng.choice(correct, count, replace=False)
    owners = [c for c in range(num_clients) if c not in attackers]
    return [TargetSpec(test.X[i].copy(), int(test.y[i]), int(rng.choice(owners)), int(i))
            for i in picked]


def _archive_current(path: Path, digest: str) -> bool:
    stamp = path / "digest.txt"
    return stamp.exists() and stamp.read_text().strip() == digest


class Pipeline:
    """One repetition of an experiment; each stage persists its artifacts under ``out``.

    ``cache`` may be shared between pipelines to reuse influence reports;
    keys include a hash of the trained model, so reuse is only possible when
    training reproduced the same parameters.
    """

    def __init__(self, config: ExperimentConfig, out, cache: dict | None = None):
        self.config = config
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = {} if cache is None else cache
        self.seed = config.seed
        self.train_set: Dataset | None = None
        self.archive: HistoryArchive | None = None

    # stages ---------------------------------------------------------------
    def prepare(self):
        cfg = self.config
        with _stage("data"):
            self.train_set, self.test_set = load_data(cfg.data, self.seed)
            self.partition = partition(self.train_set, cfg.federation.num_clients, cfg.data.partition,
                                       self.seed)
            (self.out / "partition.json").write_text(self.partition.to_json())
            self.spec = cfg.model.spec(self.train_set.feature_dim, self.train_set.class_count)
            self.shards = shards_from_partition(self.train_set, self.partition)
            self.attackers = list(range(cfg.attack.num_attackers))
        return self

    def train(self):
        cfg = self.config
        if self.train_set is None:
            self.prepare()
        with _stage("train"):
            adir = self.out / "archive"
            train_digest = hashlib.sha256(json.dumps(
                [cfg.digest, self.seed]).encode()).hexdigest()[:16]
            if _archive_current(adir, train_digest):
                self.archive = HistoryArchive.load(adir)
                self.final = self.archive.final
            else:
                self.final, self.archive = run_federation(cfg.federation, self.spec, self.train_set,
                                                          self.partition)
                self.archive.save(adir)
                (adir / "digest.txt").write_text(train_digest)
            self.acc_g = compute_accuracy(self.spec, self.final, self.test_set)
            self.targets = choose_targets(self.spec, self.final, self.test_set, cfg.attack.target_count,
                                          self.attackers, cfg.federation.num_clients, self.seed)
            (self.out / "targets.json").write_text(json.dumps(
                [{"target_id": t.target_id, "label": t.label, "owner_client": t.owner_client}
                 for t in self.targets], indent=2))
        return self

    def _attack_config(self, targets) -> AttackConfig:
        a = self.config.attack
        n, p = a.resolve(len(self.train_set))
        return AttackConfig(n, p, a.epsilon_fraction, a.mode, a.num_attackers, tuple(targets),
                            a.damping, a.cg_iters, a.cg_tol, self.seed)

    def plan(self):
        if self.archive is None:
            self.train()
        with _stage("attack"):
            key = hashlib.sha1(self.final.values.tobytes()).hexdigest()
            cache = self.cache.setdefault(key, {})
            a = self.config.attack
            groups = [self.targets] if a.multi_target else [[t] for t in self.targets]
            self.groups = []
            pdir = self.out / "plans"
            pdir.mkdir(exist_ok=True)
            for group in groups:
                audit: list[dict] = []
                plans = plan_attack(self.archive, self.shards, self._attack_config(group),
                                    self.attackers, audit, cache)
                for plan in plans:
                    stem = f"target_{plan.target_id}_attacker_{plan.attacker}"
                    plan.write_json(pdir / f"{stem}.json")
                    plan.write_csv(pdir / f"{stem}.csv")
                self.groups.append((group, plans, audit))
        return self

    def _unlearn_groups(self, benign: bool, defense: DefenseConfig | None, tag: str):
        u = self.config.unlearn
        outcomes = []
        ddir = self.out / tag
        ddir.mkdir(exist_ok=True)
        flags_att = flags_all = 0
        for group, plans, audit in self.groups:
            report = DefenseReport(defense.lam, defense.fence) if defense else None
            log_ = list(audit)
            res = unlearn_plans(self.archive, self.shards, plans, self.config.fu_mode, benign, log_,
                                u.calibration_epochs, u.removal_rate, u.removal_rounds, defense, report)
            gid = group[0].target_id if len(group) == 1 else "all"
            (ddir / f"audit_{gid}.json").write_text(json.dumps(log_, indent=2, default=_json_default))
            if report is not None:
                report.write_norms_csv(ddir / f"norms_{gid}.csv")
                report.write_json(ddir / f"defense_{gid}.json")
                for r, fl in report.flags.items():
                    flags_all += len(fl)
                    flags_att += len(set(fl) & set(self.attackers))
            if self.config.save_models:
                res.outcome.write(ddir, f"model_{gid}")
            acc = compute_accuracy(self.spec, res.unlearned, self.test_set)
            for o in target_outcomes(self.spec, self.final, res.unlearned, group):
                outcomes.append(dataclasses.replace(o, acc_unlearned=acc))
        return outcomes, flags_att, flags_all

    def benign(self):
        if not hasattr(self, "groups"):
            self.plan()
        with _stage("unlearn"):
            self.benign_outcomes, _, _ = self._unlearn_groups(True, None, "benign")
        return self

    def attack(self):
        if not hasattr(self, "benign_outcomes"):
            self.benign()
        with _stage("attack"):
            if self.config.attack.enabled:
                self.attack_outcomes, _, _ = self._unlearn_groups(False, None, "attack")
            else:
                self.attack_outcomes = list(self.benign_outcomes)
        return self

    def defend(self):
        if not hasattr(self, "attack_outcomes"):
            self.attack()
        defense = self.config.defense.build()
        self.defense_summary = None
        if defense is None:
            return self
        with _stage("defend"):
            benign = not self.config.attack.enabled
            outs, fa, ft = self._unlearn_groups(benign, defense, "defend")
            self.defense_summary = {
                "lam": defense.lam, "fence": defense.fence,
                "asr": asr_from_outcomes(outs),
                "acc_g_unlearned": float(np.mean([o.acc_unlearned for o in outs])),
                "attacker_flags": fa, "total_flags": ft,
                "outcomes": [o.to_dict() for o in outs]}
        return self

    def evaluate(self) -> MetricsBundle:
        if not hasattr(self, "defense_summary"):
            self.defend()
        cfg = self.config
        with _stage("evaluate"):
            n, p = cfg.attack.resolve(len(self.train_set))
            sizes = [len(self.shards[a][1]) for a in self.attackers]
            bundle = MetricsBundle(
                asr=asr_from_outcomes(self.attack_outcomes),
                asr_b=asr_from_outcomes(self.benign_outcomes),
                acc_g=self.acc_g,
                acc_g_unlearned=float(np.mean([o.acc_unlearned for o in self.attack_outcomes])),
                outcomes=self.attack_outcomes, benign_outcomes=self.benign_outcomes,
                seed=self.seed, config_digest=cfg.digest,
                group={"fu_mode": cfg.fu_mode, "aggregation": cfg.federation.aggregation,
                       "dataset": cfg.data.source, "epsilon_fraction": cfg.attack.epsilon_fraction,
                       "ratio": cfg.attack.ratio, "attack_mode": cfg.attack.mode,
                       "enabled": cfg.attack.enabled},
                attack={"n": n, "p": p, "attackers": self.attackers,
                        "alpha": [p / s for s in sizes],
                        "global_ratio": p * len(self.attackers) / len(self.train_set)},
                defense=self.defense_summary)
            (self.out / "bundle.json").write_text(bundle.to_json())
        return bundle


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def run_repetition(config: ExperimentConfig, index: int, out_root=None,
                   cache: dict | None = None) -> MetricsBundle:
    seed = config.seed + index
    root = Path(out_root or config.output_dir)
    cfg = config.for_seed(seed)
    out = root / f"rep_{index:02d}_seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_ini(out / "config.ini")
    return Pipeline(cfg, out, cache).evaluate()


def _rep_job(args):
    config, i, root = args
    return run_repetition(config, i, root)


def run_experiment(config: ExperimentConfig, out_root=None, workers: int = 1,
                   cache: dict | None = None) -> list[MetricsBundle]:
    """Run every repetition (seeds ``seed + i``) and return their bundles in order."""
    root = Path(out_root or config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    config.write_ini(root / "experiment.ini")
    if workers > 1 and config.repetitions > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_rep_job, [(config, i, root) for i in range(config.repetitions)]))
    return [run_repetition(config, i, root, cache) for i in range(config.repetitions)]
