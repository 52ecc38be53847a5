"""Soft partition logits and the history of frozen partitions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

INIT_STD = 0.01


def _check_shape(k: int, m: int) -> None:
    if k < 1 or m < 1:
        raise ValueError(f"need K >= 1 and m >= 1, got K={k}, m={m}")


def init_theta(k: int, m: int, seed: int, std: float = INIT_STD, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Seeded near-zero logits, i.e. near-uniform split membership."""
    _check_shape(k, m)
    gen = torch.Generator().manual_seed(int(seed))
    return std * torch.randn(k, m, generator=gen, dtype=dtype)


def soft_assign(theta: torch.Tensor) -> torch.Tensor:
    """Row-softmax membership probabilities."""
    if not torch.isfinite(theta).all():
        raise ValueError("partition logits contain non-finite values")
    return torch.softmax(theta, dim=1)


def harden(theta) -> np.ndarray:
    """Row argmax; ties go to the lowest split index."""
    arr = theta.detach().cpu().numpy() if isinstance(theta, torch.Tensor) else np.asarray(theta)
    return np.argmax(arr, axis=1).astype(np.int64)


def ascend_theta(theta: torch.Tensor, gradient: torch.Tensor, step: float) -> tuple[torch.Tensor, float]:
    """One plain gradient-ascent step; also returns the first-order objective change."""
    if gradient.shape != theta.shape:
        raise ValueError(f"gradient shape {tuple(gradient.shape)} != theta shape {tuple(theta.shape)}")
    theta_next = theta.detach() + step * gradient.detach()
    return theta_next, float(step * (gradient.detach() ** 2).sum())


@dataclass(frozen=True)
class FrozenPartition:
    splits: np.ndarray
    theta: np.ndarray
    num_splits: int

    def __post_init__(self):
        for name in ("splits", "theta"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.splits.size and (self.splits.min() < 0 or self.splits.max() >= self.num_splits):
            raise ValueError(f"split indices must lie in [0, {self.num_splits})")

    def counts(self) -> np.ndarray:
        return np.bincount(self.splits, minlength=self.num_splits)


@dataclass(frozen=True)
class PartitionHistory:
    """Partitions frozen at the end of each completed phase, oldest first."""

    entries: tuple[FrozenPartition, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> FrozenPartition:
        return self.entries[i]

    def append(self, entry: FrozenPartition) -> "PartitionHistory":
        return PartitionHistory(self.entries + (entry,))

    def to_json(self) -> list[list[int]]:
        return [e.splits.tolist() for e in self.entries]

    @classmethod
    def from_arrays(cls, splits: list, thetas: list | None = None, num_splits: list | None = None) -> "PartitionHistory":
        out = cls()
        for i, sp in enumerate(splits):
            sp = np.asarray(sp, dtype=np.int64)
            m = num_splits[i] if num_splits else int(sp.max()) + 1
            th = thetas[i] if thetas else np.zeros((len(sp), 0))
            out = out.append(FrozenPartition(sp, th, m))
        return out


def phase_seed(base_seed: int, phase: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), 7919, int(phase)]).generate_state(1)[0])


def advance_phase(
    history: PartitionHistory, theta: torch.Tensor, base_seed: int, next_phase: int
) -> tuple[PartitionHistory, torch.Tensor]:
    """Freeze ``harden(theta)`` into the history and start fresh near-uniform logits."""
    k, m = theta.shape
    entry = FrozenPartition(harden(theta), theta.detach().cpu().numpy().copy(), m)
    return history.append(entry), init_theta(k, m, phase_seed(base_seed, next_phase), dtype=theta.dtype)
