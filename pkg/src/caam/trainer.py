"""Alternating mini-game / maxi-game training and its baselines."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import ConfoundedDataset, ConfoundedSplit
from .losses import invariant_loss, maxi_game_objective, mini_game_loss, xent
from .models import BackboneConfig, CaamNet, build_model
from .partition import (
    FrozenPartition,
    PartitionHistory,
    advance_phase,
    ascend_theta,
    init_theta,
    phase_seed,
    soft_assign,
)

log = logging.getLogger(__name__)

MODES = ("caam", "caam_fixed_partition", "irm_fixed_partition", "erm", "erm_attention")
ABLATIONS = ("none", "reboot", "randomize_theta")
SCHEMA_VERSION = 1
_MODE_ATTENTION = {
    "caam": "caam",
    "caam_fixed_partition": "caam",
    "irm_fixed_partition": "none",
    "erm": "none",
    "erm_attention": "standard",
}


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mode: str = "caam"
    ablation: str = "none"
    num_phases: int = 4
    epochs_per_phase: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    lam: float = 1.0
    lam_warmup: bool = True
    num_splits: int = 4
    theta_steps: int = 200
    theta_step_size: float = 0.05
    # multiply the theta gradient by K so the step is per-sample sized
    theta_per_sample_step: bool = True
    aggregate_history: bool = True
    normalize_risk: bool = True
    maxi_penalty_only: bool = False
    # "all" or an int: merge contexts into that many splits
    fixed_partition: str | int | None = None
    seed_theta_from_partition: bool = False
    select_best: bool = True
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig.from_dict(self.backbone))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation: unknown value {self.ablation!r}")
        if self.ablation != "none" and self.mode != "caam":
            raise ConfigError("ablation: only defined for mode 'caam'")
        for name in ("num_phases", "epochs_per_phase", "batch_size", "num_splits"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.theta_steps < 0:
            raise ConfigError("theta_steps: must be >= 0")
        if self.mode in ("caam_fixed_partition", "irm_fixed_partition") and self.fixed_partition is None:
            raise ConfigError("fixed_partition: required by fixed-partition modes")
        fp = self.fixed_partition
        if fp is not None and fp != "all" and not (isinstance(fp, int) and fp >= 1):
            raise ConfigError("fixed_partition: must be 'all' or a positive integer")

    @property
    def effective_backbone(self) -> BackboneConfig:
        return replace(self.backbone, attention=_MODE_ATTENTION[self.mode])

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        doc = dict(doc)
        if "backbone" in doc:
            try:
                doc["backbone"] = BackboneConfig.from_dict(doc["backbone"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backbone: {exc}") from None
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["backbone"] = self.backbone.to_dict()
        return doc


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    maxi: list[dict] = field(default_factory=list)
    phases: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def records(self) -> list[dict]:
        """All records in one stream, tagged by ``kind``."""
        out = [{"kind": "epoch", **r} for r in self.epochs]
        out += [{"kind": "maxi", **r} for r in self.maxi]
        out += [{"kind": "phase", **r} for r in self.phases]
        out += [{"kind": "event", **r} for r in self.events]
        out += [{"kind": "eval", **r} for r in self.evals]
        return out

    def to_ndjson(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_ndjson(cls, path: str | Path) -> "TrainHistory":
        hist = cls()
        target = {"epoch": hist.epochs, "maxi": hist.maxi, "phase": hist.phases, "event": hist.events, "eval": hist.evals}
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            target[rec.pop("kind")].append(rec)
        return hist

    def loss_curve(self, key: str = "loss") -> list[float]:
        return [r[key] for r in self.epochs]


@dataclass
class TrainResult:
    model: CaamNet
    partitions: PartitionHistory
    history: TrainHistory
    theta: torch.Tensor | None = None
    best_epoch: int | None = None


# -- helpers ----------------------------------------------------------------


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 NHWC -> centred float NCHW."""
    x = torch.from_numpy(np.array(images, copy=True)).permute(0, 3, 1, 2)
    return x.to(dtype) / 255.0 - 0.5


@torch.no_grad()
def predict_logits(model: CaamNet, images: np.ndarray, head: str = "g", batch_size: int = 500) -> torch.Tensor:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, len(images), batch_size):
        out = model(images_to_tensor(images[i : i + batch_size], dtype))
        outs.append(getattr(out, f"logits_{head}"))
    model.train(was_training)
    return torch.cat(outs) if outs else torch.zeros(0, model.cfg.num_classes)


def split_accuracy(model: CaamNet, split: ConfoundedSplit, head: str = "g") -> float:
    pred = predict_logits(model, split.images, head).argmax(dim=1).numpy()
    return float((pred == split.object_labels).mean())


def ingest_fixed_partition(dataset: ConfoundedDataset | ConfoundedSplit, num_splits: int | str = "all") -> PartitionHistory:
    """One hard partition built from context labels.

    ``"all"`` gives one split per context. An integer merges contexts, sorted
    by training frequency, into groups by round-robin.
    """
    split = dataset.train if isinstance(dataset, ConfoundedDataset) else dataset
    contexts = getattr(split, "context_labels", None)
    if contexts is None or len(contexts) != len(split.object_labels):
        raise ValueError("dataset carries no context labels")
    contexts = np.asarray(contexts, dtype=np.int64)
    present = np.unique(contexts)
    if num_splits == "all":
        group_of = {int(c): i for i, c in enumerate(present)}
        m = len(present)
    else:
        m = int(num_splits)
        counts = np.bincount(contexts)
        order = sorted(present.tolist(), key=lambda c: (-counts[c], c))
        group_of = {c: i % m for i, c in enumerate(order)}
    splits = np.array([group_of[int(c)] for c in contexts], dtype=np.int64)
    return PartitionHistory().append(FrozenPartition(splits, np.zeros((len(splits), 0)), m))


def _epoch_permutation(seed: int, global_epoch: int, n: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(phase_seed(seed, 100_000 + global_epoch))
    return torch.randperm(n, generator=gen)


def _cosine(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def _params_signature(model: CaamNet) -> list[torch.Tensor]:
    return [t.detach().clone() for t in model.state_dict().values()]


# -- maxi-game --------------------------------------------------------------


@torch.no_grad()
def confounder_logits(model: CaamNet, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    """Adversary logits on the confounder branch for every training sample."""
    was_training = model.training
    model.eval()
    outs = [model(images[i : i + batch_size]).logits_h for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(outs)


def run_maxi_game(
    logits_h: torch.Tensor, labels: torch.Tensor, theta: torch.Tensor, cfg: TrainConfig, lam: float
) -> tuple[torch.Tensor, list[float]]:
    """Plain gradient ascent on the partition logits; returns theta and the objective trajectory."""
    logits_h = logits_h.detach().to(theta.dtype)
    scale = float(theta.shape[0]) if cfg.theta_per_sample_step else 1.0
    trajectory = []
    for _ in range(cfg.theta_steps):
        th = theta.detach().requires_grad_(True)
        obj = maxi_game_objective(
            logits_h, labels, th, lam, normalize=cfg.normalize_risk, penalty_only=cfg.maxi_penalty_only
        )
        (grad,) = torch.autograd.grad(obj, th)
        trajectory.append(float(obj.detach()))
        theta, _ = ascend_theta(theta, scale * grad, cfg.theta_step_size)
    with torch.no_grad():
        final = maxi_game_objective(
            logits_h, labels, theta, lam, normalize=cfg.normalize_risk, penalty_only=cfg.maxi_penalty_only
        )
    trajectory.append(float(final))
    return theta.detach(), trajectory


# -- training ---------------------------------------------------------------


def train(
    config: TrainConfig,
    dataset: ConfoundedDataset,
    fixed_partition: PartitionHistory | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the configured mode and return the selected model with its histories."""
    train_split = dataset.train
    k = len(train_split)
    if k == 0:
        raise TrainingError("empty training split")
    bb = config.effective_backbone
    spec = dataset.spec
    if bb.image_size != spec.image_size or bb.num_classes != spec.num_object_classes:
        bb = replace(bb, image_size=spec.image_size, num_classes=spec.num_object_classes)

    uses_theta = config.mode == "caam"
    uses_fixed = config.mode in ("caam_fixed_partition", "irm_fixed_partition")
    if uses_fixed or (uses_theta and config.seed_theta_from_partition):
        if fixed_partition is None:
            fixed_partition = ingest_fixed_partition(dataset, config.fixed_partition or "all")
        if len(fixed_partition) and len(fixed_partition[0].splits) != k:
            raise TrainingError(f"fixed partition covers {len(fixed_partition[0].splits)} samples, dataset has {k}")

    torch.manual_seed(phase_seed(config.seed, 999_999))
    model = build_model(bb, seed=phase_seed(config.seed, 0))
    dtype = next(model.parameters()).dtype
    images = images_to_tensor(train_split.images, dtype)
    labels = torch.as_tensor(np.array(train_split.object_labels)).long()
    val = dataset.splits.get("val")

    history = TrainHistory()
    partitions = PartitionHistory()
    theta = None
    if uses_theta:
        m = config.num_splits
        theta = init_theta(k, m, phase_seed(config.seed, 1))
        if config.seed_theta_from_partition:
            seed_splits = torch.as_tensor(np.array(fixed_partition[0].splits))
            m = max(m, fixed_partition[0].num_splits)
            theta = init_theta(k, m, phase_seed(config.seed, 1))
            theta[torch.arange(k), seed_splits % m] += 1.0
    elif uses_fixed:
        partitions = fixed_partition

    steps_per_epoch = math.ceil(k / config.batch_size)
    phase_steps = steps_per_epoch * config.epochs_per_phase
    best = (-1.0, None, None)
    global_epoch = 0

    def make_optimizer():
        return torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    optimizer = make_optimizer()
    for phase in range(config.num_phases):
        if config.ablation == "reboot" and phase > 0:
            model = build_model(bb, seed=phase_seed(config.seed, 1000 + phase))
            optimizer = make_optimizer()
            history.events.append({"event": "reboot", "phase": phase})
        live = None
        if uses_theta:
            live = soft_assign(theta).detach()
        for epoch in range(config.epochs_per_phase):
            theta_before = theta.clone() if theta is not None else None
            record = _run_epoch(
                model, optimizer, config, images, labels, partitions, live, phase, epoch, global_epoch, phase_steps,
                steps_per_epoch,
            )
            if theta is not None and not torch.equal(theta, theta_before):
                raise TrainingError("partition logits changed during the mini-game")
            if val is not None and len(val):
                record["val_acc"] = split_accuracy(model, val)
                if config.select_best and record["val_acc"] > best[0]:
                    best = (record["val_acc"], global_epoch, copy.deepcopy(model.state_dict()))
            history.epochs.append(record)
            if on_epoch is not None:
                on_epoch(record)
            log.info("phase %d epoch %d loss %.4f val %.4f", phase, epoch, record["loss"], record.get("val_acc", float("nan")))
            global_epoch += 1

        if uses_theta:
            lam = config.lam
            if config.ablation == "randomize_theta":
                gen = torch.Generator().manual_seed(phase_seed(config.seed, 2000 + phase))
                theta = torch.randn(theta.shape, generator=gen, dtype=theta.dtype)
                history.events.append({"event": "randomize_theta", "phase": phase})
            else:
                before = _params_signature(model)
                logits_h = confounder_logits(model, images)
                theta, trajectory = run_maxi_game(logits_h, labels, theta, config, lam)
                after = _params_signature(model)
                if not all(torch.equal(a, b) for a, b in zip(before, after)):
                    raise TrainingError("network parameters changed during the maxi-game")
                history.maxi.append({"phase": phase, "objective": trajectory})
            partitions, theta_next = advance_phase(partitions, theta, config.seed, phase + 1)
            frozen = partitions[-1]
            history.phases.append({"phase": phase, "split_counts": frozen.counts().tolist()})
            theta = theta_next
        else:
            history.phases.append({"phase": phase})

    if config.select_best and best[2] is not None:
        model.load_state_dict(best[2])
    model.eval()
    snapshot = {"best_epoch": best[1] if config.select_best else None}
    for name in ("iid_test", "ood_test"):
        split = dataset.splits.get(name)
        if split is not None and len(split):
            snapshot[f"{name}_acc"] = split_accuracy(model, split)
    history.evals.append(snapshot)
    return TrainResult(model, partitions, history, theta, best[1])


def _batch_partitions(
    partitions: PartitionHistory, live: torch.Tensor | None, idx: torch.Tensor, cfg: TrainConfig
) -> list[torch.Tensor]:
    parts = []
    if live is not None and partitions and not cfg.aggregate_history:
        parts.append(live[idx])
        return parts
    for entry in partitions:
        parts.append(torch.as_tensor(np.array(entry.splits))[idx])
    if live is not None:
        parts.append(live[idx])
    return parts


def _run_epoch(
    model, optimizer, cfg, images, labels, partitions, live, phase, epoch, global_epoch, phase_steps, steps_per_epoch
) -> dict:
    model.train()
    perm = _epoch_permutation(cfg.seed, global_epoch, len(labels))
    sums: dict[str, float] = {}
    n_batches = 0
    empty = 0
    for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
        step = epoch * steps_per_epoch + b
        lr = _cosine(cfg.lr, step, phase_steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        lam = cfg.lam
        if cfg.lam_warmup and phase == 0:
            lam = cfg.lam * step / max(phase_steps - 1, 1)
        idx = perm[start : start + cfg.batch_size]
        x, y = images[idx], labels[idx]
        out = model(x)
        terms = {}
        if cfg.mode in ("erm", "erm_attention"):
            loss = xent(out.logits_g, y)
            terms["xent"] = loss
        elif cfg.mode == "irm_fixed_partition":
            loss, risks = invariant_loss(out.logits_g, y, _batch_partitions(partitions, None, idx, cfg)[0], lam,
                                         normalize=cfg.normalize_risk, num_splits=partitions[0].num_splits,
                                         empty_policy="ignore")
            terms["il_g"] = loss
            terms["penalty_g"] = risks.penalties.sum()
            empty += len(risks.skipped)
        else:
            parts = _batch_partitions(partitions, live, idx, cfg)
            num_splits = max(p.num_splits for p in partitions) if partitions else cfg.num_splits
            if live is not None:
                num_splits = max(num_splits, live.shape[1])
            mg = mini_game_loss(out.logits_f, out.logits_g, out.logits_h, y, parts, lam,
                                normalize=cfg.normalize_risk, num_splits=num_splits)
            loss = mg.total
            terms.update(xent_f=mg.xent_f, il_g=mg.il_g, xent_h=mg.xent_h, penalty_g=mg.penalty_g)
            empty += mg.skipped_splits
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at phase {phase}, epoch {epoch}, batch {b}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        for key, val in terms.items():
            sums[key] = sums.get(key, 0.0) + float(val.detach())
        sums["loss"] = sums.get("loss", 0.0) + float(loss.detach())
        n_batches += 1
    record = {"phase": phase, "epoch": global_epoch, "lr": lr, "lambda": lam}
    record.update({k: v / n_batches for k, v in sums.items()})
    if cfg.mode not in ("erm", "erm_attention"):
        record["empty_splits"] = empty
    return record


def run_ablation(config: TrainConfig, dataset: ConfoundedDataset) -> TrainResult:
    """Train with ``config.ablation`` applied; ``"none"`` is plain training."""
    if config.mode != "caam":
        raise ConfigError("ablations are defined for mode 'caam'")
    return train(config, dataset)
