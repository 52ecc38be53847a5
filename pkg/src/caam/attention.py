"""Complementary attention for CNN and transformer features.

CNN tensors are NCHW, token tensors are (batch, tokens, dim).
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


class LayoutError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class AttentionPair(NamedTuple):
    causal: torch.Tensor
    confounder: torch.Tensor


def _require_spatial(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise LayoutError(f"expected a spatial (N, C, H, W) tensor, got shape {tuple(x.shape)}")


def _require_tokens(x: torch.Tensor) -> None:
    if x.dim() != 3:
        raise LayoutError(f"expected a token (N, L, D) tensor, got shape {tuple(x.shape)}")


class CBAMLogits(nn.Module):
    """Pre-sigmoid CBAM logits ``z`` with the same shape as the input.

    Channel and spatial logits are added, so ``sigmoid(z)`` and
    ``sigmoid(-z)`` stay exact complements.
    """

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7, zero_init: bool = True):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)
        if zero_init:
            nn.init.zeros_(self.mlp[2].weight)
            nn.init.zeros_(self.mlp[2].bias)
            nn.init.zeros_(self.spatial.weight)
            nn.init.zeros_(self.spatial.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_spatial(x)
        z_channel = self.mlp(x.mean(dim=(2, 3))) + self.mlp(x.amax(dim=(2, 3)))
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        z_spatial = self.spatial(pooled)
        return z_channel[:, :, None, None] + z_spatial


def caam_split_cnn(x: torch.Tensor, z: torch.Tensor) -> AttentionPair:
    """``c = sigmoid(z) * x`` and ``s = sigmoid(-z) * x``."""
    _require_spatial(x)
    if z.shape != x.shape:
        raise ValueError(f"logit shape {tuple(z.shape)} differs from feature shape {tuple(x.shape)}")
    if not torch.isfinite(z).all():
        raise NumericError("non-finite attention logits")
    return AttentionPair(torch.sigmoid(z) * x, torch.sigmoid(-z) * x)


class CBAM(nn.Module):
    """Conventional sequential CBAM: channel gate, then spatial gate on the refined map."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _require_spatial(x)
        gate_c = torch.sigmoid(self.mlp(x.mean(dim=(2, 3))) + self.mlp(x.amax(dim=(2, 3))))[:, :, None, None]
        refined = x * gate_c
        pooled = torch.cat([refined.mean(dim=1, keepdim=True), refined.amax(dim=1, keepdim=True)], dim=1)
        gate_s = torch.sigmoid(self.spatial(pooled))
        # spatial map of the total multiplicative gate
        attention = (gate_c * gate_s).mean(dim=1)
        return refined * gate_s, attention


def _conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout))


class BasicBlock(nn.Module):
    """Residual block, optionally gated by CBAM before the skip addition."""

    def __init__(self, cin: int, cout: int, stride: int = 1, cbam: bool = False, reduction: int = 16):
        super().__init__()
        self.body = nn.Sequential(_conv_bn(cin, cout, stride), nn.ReLU(), _conv_bn(cout, cout))
        self.cbam = CBAM(cout, reduction) if cbam else None
        self.shortcut = (
            nn.Identity()
            if stride == 1 and cin == cout
            else nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        )
        self.last_attention = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.body(x)
        if self.cbam is not None:
            out, self.last_attention = self.cbam(out)
        return F.relu(out + self.shortcut(x))


class CaaMConv(nn.Module):
    """Convolutional body followed by the complementary sigmoid split."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.body = nn.Sequential(_conv_bn(channels, channels), nn.ReLU(), _conv_bn(channels, channels))
        self.logits = CBAMLogits(channels, reduction, spatial_kernel)
        self.last_attention = None

    def forward(self, x: torch.Tensor) -> AttentionPair:
        feat = self.body(x)
        z = self.logits(feat)
        self.last_attention = torch.sigmoid(z).mean(dim=1)
        return caam_split_cnn(feat, z)


def d_block(
    inner: AttentionPair,
    is_init: bool,
    prev_c: torch.Tensor | None = None,
    prev_s: torch.Tensor | None = None,
    residual_input: torch.Tensor | None = None,
) -> AttentionPair:
    """Skip wiring of a disentanglement block.

    The initial block adds the standard-backbone output to the causal branch
    only; later blocks add the previous causal and confounder features to
    their own branch.
    """
    c_hat, s_hat = inner
    if is_init:
        if residual_input is None:
            raise ValueError("the initial D-Block needs residual_input")
        return AttentionPair(c_hat + residual_input, s_hat)
    if prev_c is None or prev_s is None:
        raise ValueError("a non-initial D-Block needs prev_c and prev_s")
    return AttentionPair(c_hat + prev_c, s_hat + prev_s)


class DBlock(nn.Module):
    def __init__(self, channels: int, is_init: bool, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.is_init = is_init
        self.caam = CaaMConv(channels, reduction, spatial_kernel)

    @property
    def last_attention(self):
        return self.caam.last_attention

    def forward(
        self, x: torch.Tensor, prev_c: torch.Tensor | None = None, prev_s: torch.Tensor | None = None
    ) -> AttentionPair:
        inner = self.caam(x)
        if self.is_init:
            return d_block(inner, True, residual_input=x)
        return d_block(inner, False, prev_c, prev_s)


class MBlock(nn.Module):
    """``x = Conv(c) + Conv(s)`` with separate 1x1 convolutions, identity-initialised."""

    def __init__(self, channels: int, kernel_size: int = 1, identity_init: bool = True):
        super().__init__()
        self.conv_c = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, bias=False)
        self.conv_s = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, bias=False)
        if identity_init:
            for conv in (self.conv_c, self.conv_s):
                nn.init.zeros_(conv.weight)
                with torch.no_grad():
                    idx = torch.arange(channels)
                    conv.weight[idx, idx, kernel_size // 2, kernel_size // 2] = 1.0

    def forward(self, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        if c.shape != s.shape:
            raise ValueError(f"causal {tuple(c.shape)} and confounder {tuple(s.shape)} shapes differ")
        return self.conv_c(c) + self.conv_s(s)


# -- transformer ------------------------------------------------------------


class SoftmaxSplit(NamedTuple):
    causal: torch.Tensor
    confounder: torch.Tensor
    attn_pos: torch.Tensor
    attn_neg: torch.Tensor


def caam_split_vit(
    x: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor, heads: int = 1
) -> SoftmaxSplit:
    """Softmax attention on ``+qk^T/sqrt(d_k)`` and ``-qk^T/sqrt(d_k)``.

    ``w_*`` have shape (d_k, d) as in ``nn.Linear``. Outputs are (N, L, d_k);
    the attention matrices are (N, heads, L, L).
    """
    _require_tokens(x)
    d_k = w_q.shape[0]
    if d_k <= 0 or d_k % heads:
        raise ValueError(f"d_k={d_k} must be positive and divisible by heads={heads}")
    if w_q.shape[1] != x.shape[-1] or w_k.shape != w_q.shape or w_v.shape != w_q.shape:
        raise ValueError("projection shapes do not match the token dimension")
    n, length, _ = x.shape
    head_dim = d_k // heads

    def project(w):
        return (x @ w.T).view(n, length, heads, head_dim).transpose(1, 2)

    q, k, v = project(w_q), project(w_k), project(w_v)
    logits = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
    attn_pos = torch.softmax(logits, dim=-1)
    attn_neg = torch.softmax(-logits, dim=-1)

    def merge(t):
        return t.transpose(1, 2).reshape(n, length, d_k)

    return SoftmaxSplit(merge(attn_pos @ v), merge(attn_neg @ v), attn_pos, attn_neg)


class ComplementaryAttention(nn.Module):
    def __init__(self, dim: int, d_k: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, d_k, bias=False)
        self.k = nn.Linear(dim, d_k, bias=False)
        self.v = nn.Linear(dim, d_k, bias=False)
        self.proj = nn.Linear(d_k, dim)
        # zero queries give uniform attention in both branches at init
        nn.init.zeros_(self.q.weight)

    def forward(self, x: torch.Tensor) -> SoftmaxSplit:
        split = caam_split_vit(x, self.q.weight, self.k.weight, self.v.weight, self.heads)
        return split._replace(causal=self.proj(split.causal), confounder=self.proj(split.confounder))


def _mlp(dim: int, ratio: float) -> nn.Sequential:
    hidden = int(dim * ratio)
    return nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class ViTCaaMBlock(nn.Module):
    """Transformer block whose confounder branch skips the input residual."""

    def __init__(self, dim: int, d_k: int, heads: int = 1, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm_in = nn.LayerNorm(dim)
        self.attn = ComplementaryAttention(dim, d_k, heads)
        self.norm_c = nn.LayerNorm(dim)
        self.norm_s = nn.LayerNorm(dim)
        self.mlp_c = _mlp(dim, mlp_ratio)
        self.mlp_s = _mlp(dim, mlp_ratio)
        self.last_attention = None

    def combine(self, x: torch.Tensor, c_hat: torch.Tensor, s_hat: torch.Tensor):
        c_pre = c_hat + x
        c = self.mlp_c(self.norm_c(c_pre)) + c_pre
        s = self.mlp_s(self.norm_s(s_hat)) + s_hat
        return c, s, c + s

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        _require_tokens(x)
        split = self.attn(self.norm_in(x))
        self.last_attention = split.attn_pos.mean(dim=1)
        return self.combine(x, split.causal, split.confounder)


class ViTBlock(nn.Module):
    """Standard pre-norm transformer block."""

    def __init__(self, dim: int, heads: int = 1, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, mlp_ratio)
        self.last_attention = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_tokens(x)
        h = self.norm1(x)
        out, weights = self.attn(h, h, h, need_weights=True, average_attn_weights=True)
        self.last_attention = weights
        x = x + out
        return x + self.mlp(self.norm2(x))


def token_attention_to_grid(attn: torch.Tensor) -> torch.Tensor:
    """Average received attention over query rows and reshape to the patch grid."""
    n, length, _ = attn.shape
    side = int(round(math.sqrt(length)))
    if side * side != length:
        raise ValueError(f"{length} tokens do not form a square grid")
    return attn.mean(dim=1).view(n, side, side)
