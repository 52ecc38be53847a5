"""Causal attention with adversarial data partitioning for confounded image classification."""
from .attention import AttentionPair, caam_split_cnn, caam_split_vit
from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .estimator import CaamClassifier
from .models import BackboneConfig, CaamNet, build_model
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionPair",
    "BackboneConfig",
    "CaamClassifier",
    "CaamNet",
    "DatasetSpec",
    "TrainConfig",
    "build_model",
    "caam_split_cnn",
    "caam_split_vit",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "train",
]
