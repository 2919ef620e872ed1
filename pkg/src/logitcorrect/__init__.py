"""Logits-level correction of adversarial examples, from attack to explanation."""
from .attacks import AttackConfig, AttackResult, attack_dataset, preset
from .classifier import ClassifierSpec, Dataset, LabeledExample, train_classifier
from .defender import DefenderConfig, LogitsRecord, train_defender
from .nn import Network, build_network, backward, forward

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "attack_dataset", "preset",
    "ClassifierSpec", "Dataset", "LabeledExample", "train_classifier",
    "DefenderConfig", "LogitsRecord", "train_defender",
    "Network", "build_network", "backward", "forward",
]
