"""Biased cross-entropy, invariant loss and the adversarial game objectives.

Every function takes logits (the head already applied) so the caller decides
which parameters a gradient may reach.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

EMPTY_SPLIT_MASS = 1e-8


class EmptySplitError(ValueError):
    pass


class EmptySplitWarning(RuntimeWarning):
    pass


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not match")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels outside [0, {logits.shape[1]})")


def per_sample_xent(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels, reduction="none")


def xent(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy in nats."""
    return per_sample_xent(logits, labels).mean()


def dummy_scale_gradient(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample ``d/dw l(w * logits, y)`` at ``w = 1``.

    With ``p = softmax(logits)`` this is ``sum_k logits_k (p_k - [k == y])``.
    """
    _check_labels(logits, labels)
    p = torch.softmax(logits, dim=1)
    return (logits * p).sum(dim=1) - logits.gather(1, labels[:, None]).squeeze(1)


def grad_penalty(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Squared derivative of the weighted mean risk w.r.t. a scalar dummy classifier at 1."""
    d = dummy_scale_gradient(logits, labels)
    if weights is None:
        return d.mean() ** 2
    mass = weights.sum()
    if not mass > 0:
        raise EmptySplitError("split has zero total weight")
    return ((weights * d).sum() / mass) ** 2


@dataclass
class SplitRisks:
    risks: torch.Tensor
    penalties: torch.Tensor
    masses: torch.Tensor
    skipped: list[int] = field(default_factory=list)


def _as_weights(partition: torch.Tensor, n: int, num_splits: int | None) -> torch.Tensor:
    """Soft (n, m) weights from either soft weights or a hard index vector."""
    if partition.dim() == 1:
        if partition.shape[0] != n:
            raise ValueError(f"hard partition covers {partition.shape[0]} samples, batch has {n}")
        m = num_splits if num_splits is not None else int(partition.max()) + 1
        return F.one_hot(partition.long(), m).to(torch.get_default_dtype())
    if partition.shape[0] != n:
        raise ValueError(f"soft partition covers {partition.shape[0]} samples, batch has {n}")
    return partition


def invariant_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    partition: torch.Tensor,
    lam: float,
    *,
    normalize: bool = True,
    num_splits: int | None = None,
    penalty_only: bool = False,
    empty_policy: str = "skip",
) -> tuple[torch.Tensor, SplitRisks]:
    """Sum over splits of split risk plus ``lam`` times the dummy-classifier penalty.

    ``partition`` is either an (n, m) weight matrix or an (n,) index vector.
    With ``normalize`` each split risk is a mass-weighted mean; otherwise
    weighted losses are divided by the batch size. Splits lighter than
    ``EMPTY_SPLIT_MASS`` contribute zero: with a warning (``empty_policy="skip"``),
    silently (``"ignore"``, the caller counts ``SplitRisks.skipped``) or they
    raise (``"raise"``).
    """
    n = logits.shape[0]
    weights = _as_weights(partition, n, num_splits).to(logits.dtype)
    losses = per_sample_xent(logits, labels)
    d = dummy_scale_gradient(logits, labels)
    masses = weights.sum(dim=0)
    risks, penalties, skipped = [], [], []
    total = logits.new_zeros(())
    for t in range(weights.shape[1]):
        w = weights[:, t]
        mass = masses[t]
        if not mass > EMPTY_SPLIT_MASS:
            if empty_policy == "raise":
                raise EmptySplitError(f"split {t} has mass {float(mass):.3g}")
            skipped.append(t)
            risks.append(logits.new_zeros(()))
            penalties.append(logits.new_zeros(()))
            continue
        denom = mass if normalize else logits.new_tensor(float(n))
        risk = (w * losses).sum() / denom
        penalty = ((w * d).sum() / denom) ** 2
        risks.append(risk)
        penalties.append(penalty)
        total = total + lam * penalty + (0.0 if penalty_only else risk)
    if skipped and empty_policy == "skip":
        warnings.warn(f"skipped {len(skipped)} empty split(s): {skipped}", EmptySplitWarning, stacklevel=2)
    return total, SplitRisks(torch.stack(risks), torch.stack(penalties), masses, skipped)


@dataclass
class MiniGameTerms:
    total: torch.Tensor
    xent_f: torch.Tensor
    il_g: torch.Tensor
    xent_h: torch.Tensor
    penalty_g: torch.Tensor
    skipped_splits: int = 0


def mini_game_loss(
    logits_f: torch.Tensor,
    logits_g: torch.Tensor,
    logits_h: torch.Tensor,
    labels: torch.Tensor,
    partitions: list[torch.Tensor],
    lam: float,
    *,
    normalize: bool = True,
    num_splits: int | None = None,
) -> MiniGameTerms:
    """``XE(f, c+s) + IL(g, c, T) + XE(h, s)``.

    The invariant term averages over ``partitions`` with equal weight. Soft
    partitions are detached so no gradient reaches the partition logits.
    """
    if not partitions:
        raise ValueError("mini_game_loss needs at least one partition")
    il = logits_g.new_zeros(())
    pen = logits_g.new_zeros(())
    skipped = 0
    for part in partitions:
        value, risks = invariant_loss(
            logits_g, labels, part.detach(), lam, normalize=normalize, num_splits=num_splits, empty_policy="ignore"
        )
        il = il + value
        pen = pen + risks.penalties.sum()
        skipped += len(risks.skipped)
    il = il / len(partitions)
    pen = pen / len(partitions)
    xf = xent(logits_f, labels)
    xh = xent(logits_h, labels)
    return MiniGameTerms(xf + il + xh, xf, il, xh, pen, skipped)


def maxi_game_objective(
    logits_h: torch.Tensor,
    labels: torch.Tensor,
    theta: torch.Tensor,
    lam: float,
    *,
    normalize: bool = True,
    penalty_only: bool = False,
) -> torch.Tensor:
    """Invariant loss of the adversary under the soft partition ``softmax(theta)``.

    ``logits_h`` is detached: only ``theta`` receives gradient.
    """
    if theta.shape[0] != logits_h.shape[0]:
        raise ValueError(f"theta has {theta.shape[0]} rows but there are {logits_h.shape[0]} samples")
    value, _ = invariant_loss(
        logits_h.detach(), labels, torch.softmax(theta, dim=1), lam, normalize=normalize, penalty_only=penalty_only
    )
    return value
