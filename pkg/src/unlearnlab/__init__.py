"""Federated learning, unlearning and malicious-unlearning experiments on small numpy models."""

from .aggregation import AggregationRule, aggregate
from .attack import AttackConfig, AttackPlan, execute_attack
from .data import Dataset, Example, Partition, partition
from .defense import DefenseConfig, DefenseReport, defend_round, flag_outliers, gradient_norm
from .experiment import ExperimentConfig, MetricsBundle, load_config, run_experiment
from .federation import FederationConfig, HistoryArchive, run_federation
from .influence import TargetSpec, craft_malicious_samples, influence_scores, select_influential
from .metrics import compute_accuracy, compute_asr
from .model import ModelSpec, ParamVector
from .report import report
from .unlearning import UnlearnOutcome, UnlearnRequest, federaser_unlearn, retrain_oracle

__version__ = "0.1.0"
