"""Targeted transfer attacks with searched affine augmentation policies."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, Recipe, run_attack
from .errors import AAITError, ConfigurationError, DomainError, NumericError
from .imgops import OperationKind, apply_operation, gated_apply
from .losses import LossKind, targeted_loss
from .policy import Policy, PolicyParameters, Vocabulary, apply_policy, load_policy, save_policy
from .search import SearchConfig, run_search
from .surrogates import Classifier, EnsembleClassifier, build_classifier, load_classifier

__all__ = [
    "AAITError", "AttackConfig", "AttackResult", "Classifier", "ConfigurationError", "DomainError",
    "EnsembleClassifier", "LossKind", "NumericError", "OperationKind", "Policy", "PolicyParameters", "Recipe",
    "SearchConfig", "Vocabulary", "apply_operation", "apply_policy", "build_classifier", "gated_apply",
    "load_classifier", "load_policy", "run_attack", "run_search", "save_policy", "targeted_loss",
]
