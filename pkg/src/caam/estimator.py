"""Scikit-learn style wrapper around the trainer."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ConfoundedDataset, ConfoundedSplit, DatasetSpec
from .models import BackboneConfig
from .partition import PartitionHistory
from .trainer import MODES, TrainConfig, images_to_tensor, train


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an N x H x W x 3 image batch and return it as uint8.

    Float input is accepted when it lies in [0, 1] and is rescaled.
    """
    arr = np.asarray(X)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if image_size is not None and arr.shape[1] != image_size:
        raise ValueError(f"estimator was fitted on {image_size}px images, got {arr.shape[1]}px")
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
            raise ValueError("float images must be finite and within [0, 1]")
        return np.rint(arr * 255).astype(np.uint8)
    if np.issubdtype(arr.dtype, np.integer):
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("integer images must lie in [0, 255]")
        return arr.astype(np.uint8)
    raise ValueError(f"unsupported image dtype {arr.dtype}")


def check_groups(groups, n: int, name: str = "contexts") -> np.ndarray:
    arr = np.asarray(groups)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer) or (arr.size and arr.min() < 0):
        raise ValueError(f"{name} must be non-negative integers")
    return arr.astype(np.int64)


class CaamClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Image classifier trained with a given mode.

    ``fit(X, y, contexts=None)``. Context labels are needed only by the
    fixed-partition modes. ``predict`` uses the robust head on the causal
    feature and ``transform`` returns that feature.
    """

    def __init__(
        self,
        mode: str = "caam",
        backbone: str = "cnn",
        num_caam_layers: int = 2,
        num_phases: int = 4,
        epochs_per_phase: int = 15,
        batch_size: int = 64,
        lr: float = 1e-3,
        lam: float = 1.0,
        num_splits: int = 4,
        theta_steps: int = 200,
        theta_step_size: float = 0.05,
        fixed_partition="all",
        ablation: str = "none",
        seed: int = 0,
    ):
        self.mode = mode
        self.backbone = backbone
        self.num_caam_layers = num_caam_layers
        self.num_phases = num_phases
        self.epochs_per_phase = epochs_per_phase
        self.batch_size = batch_size
        self.lr = lr
        self.lam = lam
        self.num_splits = num_splits
        self.theta_steps = theta_steps
        self.theta_step_size = theta_step_size
        self.fixed_partition = fixed_partition
        self.ablation = ablation
        self.seed = seed

    def _config(self, image_size: int, num_classes: int) -> TrainConfig:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        fixed = self.fixed_partition if self.mode in ("caam_fixed_partition", "irm_fixed_partition") else None
        bb = BackboneConfig(
            kind=self.backbone, num_caam_layers=self.num_caam_layers, num_classes=num_classes, image_size=image_size
        )
        return TrainConfig(
            backbone=bb,
            mode=self.mode,
            ablation=self.ablation,
            num_phases=self.num_phases,
            epochs_per_phase=self.epochs_per_phase,
            batch_size=self.batch_size,
            lr=self.lr,
            lam=self.lam,
            num_splits=self.num_splits,
            theta_steps=self.theta_steps,
            theta_step_size=self.theta_step_size,
            fixed_partition=fixed,
            select_best=False,
            seed=self.seed,
        )

    def fit(self, X, y, contexts=None):
        images = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(images),):
            raise ValueError(f"y must have shape ({len(images)},), got {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if contexts is None:
            if self.mode in ("caam_fixed_partition", "irm_fixed_partition"):
                raise ValueError(f"mode {self.mode!r} needs context labels")
            ctx = np.zeros(len(images), dtype=np.int64)
        else:
            ctx = check_groups(contexts, len(images))
        num_contexts = int(ctx.max()) + 1 if len(ctx) else 1
        size = images.shape[1]
        spec = DatasetSpec(
            num_object_classes=len(self.classes_),
            num_contexts=num_contexts,
            contexts_seen_per_class=num_contexts,
            image_size=size,
            n_train=len(images),
            seed=self.seed,
        )
        split = ConfoundedSplit(
            images, encoded.astype(np.int64), ctx, np.zeros(images.shape[:3], dtype=np.uint8)
        )
        config = self._config(size, len(self.classes_))
        result = train(config, ConfoundedDataset(spec, {"train": split}))
        self.model_ = result.model
        self.partitions_: PartitionHistory = result.partitions
        self.history_ = result.history
        self.image_size_ = size
        self.n_features_in_ = size * size * 3
        return self

    @torch.no_grad()
    def _forward(self, X, batch_size: int = 250) -> list:
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_size_)
        dtype = next(self.model_.parameters()).dtype
        self.model_.eval()
        return [self.model_(images_to_tensor(images[i : i + batch_size], dtype)) for i in range(0, len(images), batch_size)]

    def decision_function(self, X) -> np.ndarray:
        return np.concatenate([o.logits_g.double().numpy() for o in self._forward(X)])

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.from_numpy(self.decision_function(X))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        return np.concatenate([o.c_feat.double().numpy() for o in self._forward(X)])

    def attention_maps(self, X) -> np.ndarray | None:
        maps = [o.attention.double().numpy() for o in self._forward(X) if o.attention is not None]
        return np.concatenate(maps) if maps else None
