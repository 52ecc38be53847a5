"""Backbones, heads and checkpoint containers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .attention import BasicBlock, DBlock, MBlock, NumericError, ViTBlock, ViTCaaMBlock, token_attention_to_grid

ATTENTION_KINDS = ("caam", "standard", "none")


@dataclass(frozen=True)
class BackboneConfig:
    """Network layout.

    ``attention`` picks what fills the last ``num_caam_layers`` slots:
    CaaM layers, conventional attention (CBAM blocks for the CNN, plain
    self-attention for the ViT), or plain residual blocks.
    """

    kind: str = "cnn"
    attention: str = "caam"
    num_caam_layers: int = 2
    num_classes: int = 10
    image_size: int = 64
    # cnn
    stem_channels: int = 16
    stem_stride: int = 4
    block_channels: tuple[int, ...] = (32,)
    block_strides: tuple[int, ...] = (2,)
    reduction: int = 16
    spatial_kernel: int = 7
    # vit
    patch_size: int = 8
    dim: int = 64
    d_k: int = 64
    heads: int = 1
    num_standard_blocks: int = 1
    mlp_ratio: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(v) for v in self.block_channels))
        object.__setattr__(self, "block_strides", tuple(int(v) for v in self.block_strides))
        if self.kind not in ("cnn", "vit"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.num_caam_layers < 1:
            raise ValueError("num_caam_layers must be >= 1")
        if len(self.block_channels) != len(self.block_strides):
            raise ValueError("block_channels and block_strides differ in length")
        if self.kind == "vit" and self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")

    @property
    def feature_dim(self) -> int:
        if self.kind == "vit":
            return self.dim
        return self.block_channels[-1] if self.block_channels else self.stem_channels

    @classmethod
    def from_dict(cls, doc: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown backbone field {unknown[0]!r}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["block_channels"] = list(self.block_channels)
        doc["block_strides"] = list(self.block_strides)
        return doc


class Features(NamedTuple):
    causal: torch.Tensor
    confounder: torch.Tensor
    attention: torch.Tensor | None


def _check_finite(t: torch.Tensor, layer: int) -> None:
    if not torch.isfinite(t).all():
        raise NumericError("non-finite activations", layer)


class CNNBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        k = max(3, cfg.stem_stride + 1) | 1
        self.stem = nn.Sequential(
            nn.Conv2d(3, cfg.stem_channels, k, cfg.stem_stride, k // 2, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(),
        )
        blocks, cin = [], cfg.stem_channels
        for cout, stride in zip(cfg.block_channels, cfg.block_strides):
            blocks.append(BasicBlock(cin, cout, stride))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        if cfg.attention == "caam":
            self.d_blocks = nn.ModuleList(
                DBlock(cin, is_init=(i == 0), reduction=cfg.reduction, spatial_kernel=cfg.spatial_kernel)
                for i in range(cfg.num_caam_layers)
            )
            self.m_blocks = nn.ModuleList(MBlock(cin) for _ in range(cfg.num_caam_layers - 1))
        else:
            self.tail = nn.ModuleList(
                BasicBlock(cin, cin, cbam=(cfg.attention == "standard"), reduction=cfg.reduction)
                for _ in range(cfg.num_caam_layers)
            )

    def forward(self, images: torch.Tensor) -> Features:
        x = self.stem(images)
        layer = 0
        _check_finite(x, layer)
        for block in self.blocks:
            layer += 1
            x = block(x)
            _check_finite(x, layer)
        if self.cfg.attention == "caam":
            c, s = self.d_blocks[0](x)
            for m_block, d_blk in zip(self.m_blocks, self.d_blocks[1:]):
                layer += 1
                c, s = d_blk(m_block(c, s), c, s)
                _check_finite(c, layer)
                _check_finite(s, layer)
            attention = self.d_blocks[-1].last_attention
            return Features(c.mean(dim=(2, 3)), s.mean(dim=(2, 3)), attention)
        for block in self.tail:
            layer += 1
            x = block(x)
            _check_finite(x, layer)
        attention = self.tail[-1].last_attention if self.cfg.attention == "standard" else None
        pooled = x.mean(dim=(2, 3))
        return Features(pooled, torch.zeros_like(pooled), attention)


class ViTBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = nn.Conv2d(3, cfg.dim, cfg.patch_size, cfg.patch_size)
        num_tokens = (cfg.image_size // cfg.patch_size) ** 2
        self.pos = nn.Parameter(torch.zeros(1, num_tokens, cfg.dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(ViTBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.num_standard_blocks))
        if cfg.attention == "caam":
            self.tail = nn.ModuleList(
                ViTCaaMBlock(cfg.dim, cfg.d_k, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.num_caam_layers)
            )
        else:
            self.tail = nn.ModuleList(ViTBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.num_caam_layers))
            self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, images: torch.Tensor) -> Features:
        x = self.patch(images).flatten(2).transpose(1, 2) + self.pos
        layer = 0
        _check_finite(x, layer)
        for block in self.blocks:
            layer += 1
            x = block(x)
            _check_finite(x, layer)
        if self.cfg.attention == "caam":
            for block in self.tail:
                layer += 1
                c, s, x = block(x)
                _check_finite(x, layer)
            grid = token_attention_to_grid(self.tail[-1].last_attention)
            return Features(c.mean(dim=1), s.mean(dim=1), grid)
        for block in self.tail:
            layer += 1
            x = block(x)
            _check_finite(x, layer)
        pooled = self.norm(x).mean(dim=1)
        return Features(pooled, torch.zeros_like(pooled), token_attention_to_grid(self.tail[-1].last_attention))


class ForwardOutput(NamedTuple):
    c_feat: torch.Tensor
    s_feat: torch.Tensor
    mixed_feat: torch.Tensor
    logits_f: torch.Tensor
    logits_g: torch.Tensor
    logits_h: torch.Tensor
    attention: torch.Tensor | None


class CaamNet(nn.Module):
    """Backbone plus the biased head ``f``, robust head ``g`` and adversary ``h``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = CNNBackbone(cfg) if cfg.kind == "cnn" else ViTBackbone(cfg)
        d = cfg.feature_dim
        self.f = nn.Linear(d, cfg.num_classes)
        self.g = nn.Linear(d, cfg.num_classes)
        self.h = nn.Linear(d, cfg.num_classes)

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        expected = (3, self.cfg.image_size, self.cfg.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"expected images of shape (N, {expected}), got {tuple(images.shape)}")
        c, s, attention = self.backbone(images)
        mixed = c + s
        return ForwardOutput(c, s, mixed, self.f(mixed), self.g(c), self.h(s), attention)


def build_model(cfg: BackboneConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> CaamNet:
    """Construct a network with seed-determined initial weights."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = CaamNet(cfg).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


# -- checkpoints ------------------------------------------------------------

HEADER_KEY = "__header__"


def save_checkpoint(path: str | Path, model: CaamNet, header: dict | None = None, extra: dict | None = None) -> None:
    """Write parameters (and buffers) as named arrays with a JSON header.

    ``extra`` maps names to additional arrays, e.g. partition logits.
    """
    doc = {"format": "caam-checkpoint/1", "backbone": model.cfg.to_dict(), **(header or {})}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    model: CaamNet
    header: dict
    extra: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as z:
        header = json.loads(bytes(z[HEADER_KEY]).decode())
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    cfg = BackboneConfig.from_dict(header["backbone"])
    model = CaamNet(cfg)
    dtype = next(iter(params.values())).dtype if params else np.float32
    if dtype == np.float64:
        model = model.double()
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.items()}
    model.load_state_dict(state)
    return Checkpoint(model, header, extra)
