"""Integrated-gradient transfer attacks with multiple, monotonic and
diversified integration paths, on a small numpy autodiff engine."""

from .attack import AttackConfig, AdversarialResult, estimate, run_attack, run_attack_batch
from .models import ClassifierModel, LossKind, train_classifier

__version__ = "0.1.0"

__all__ = [
    "AdversarialResult",
    "AttackConfig",
    "ClassifierModel",
    "LossKind",
    "estimate",
    "run_attack",
    "run_attack_batch",
    "train_classifier",
]
