"""Reweighed gradient attacks on ensemble classifiers, toy diversity
defenses, and a brute-force robustness oracle, all on a small numpy
autodiff core."""

__version__ = "0.1.0"

from .attacks import (
    AttackConfig,
    AttackResult,
    cw_attack,
    mora_attack,
    mora_mt,
    mora_sweep,
    pgd_attack,
)
from .defense import (
    DatasetSpec,
    TrainConfig,
    generate_dataset,
    grad_cosine_stats,
    train_ensemble,
)
from .errors import (
    CleanMisclassifiedError,
    ConfigError,
    ContractViolation,
    DivergenceError,
    IOFormatError,
    MoraError,
)
from .models import Ensemble, MLPClassifier, load_ensemble, save_ensemble
from .objectives import ObjectiveContext, importance_weight, mora_loss
from .oracle import OracleVerdict, brute_force_robust, check_weight_formula, completeness

__all__ = [
    "AttackConfig",
    "AttackResult",
    "CleanMisclassifiedError",
    "ConfigError",
    "ContractViolation",
    "DatasetSpec",
    "DivergenceError",
    "Ensemble",
    "IOFormatError",
    "MLPClassifier",
    "MoraError",
    "ObjectiveContext",
    "OracleVerdict",
    "TrainConfig",
    "brute_force_robust",
    "check_weight_formula",
    "completeness",
    "cw_attack",
    "generate_dataset",
    "grad_cosine_stats",
    "importance_weight",
    "load_ensemble",
    "mora_attack",
    "mora_loss",
    "mora_mt",
    "mora_sweep",
    "pgd_attack",
    "save_ensemble",
    "train_ensemble",
]
