"""Vision Transformer encoder, projection heads and teacher EMA updates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class BackbonePreset:
    name: str
    depth: int
    width: int
    heads: int
    patch_side: int = 16
    mlp_ratio: float = 4.0


PRESETS = {
    # standard ViT configurations
    "tiny/16": BackbonePreset("tiny/16", depth=12, width=192, heads=3),
    "base/16": BackbonePreset("base/16", depth=12, width=768, heads=12),
    "large/16": BackbonePreset("large/16", depth=24, width=1024, heads=16),
    # desk-scale presets for experiments and tests
    "tiny-desk": BackbonePreset("tiny-desk", depth=4, width=96, heads=4),
    "nano": BackbonePreset("nano", depth=2, width=32, heads=2),
}


def get_preset(name: str) -> BackbonePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class TokenEmbeddings:
    """Backbone output: one global token plus T patch tokens per image."""

    global_token: Tensor  # (B, D)
    patch_tokens: Tensor  # (B, T, D)
    grid_shape: tuple[int, int]

    @property
    def token_count(self) -> int:
        return self.patch_tokens.shape[-2]

    @property
    def width(self) -> int:
        return self.patch_tokens.shape[-1]


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(self.norm1(x)).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        x = x + self.proj(attn.transpose(1, 2).reshape(b, n, d))
        x = x + self.mlp(self.norm2(x))
        return x


class VisionTransformer(nn.Module):
    """Plain pre-norm ViT with a learned class token and fixed-grid positions.

    The input side is fixed at construction; every image is expected to be
    resized to it beforehand, so positional embeddings never need
    interpolation.
    """

    def __init__(self, preset: BackbonePreset, input_side: int):
        super().__init__()
        if input_side <= 0 or input_side % preset.patch_side != 0:
            raise ShapeError(
                f"input side {input_side} is not divisible by patch side {preset.patch_side}"
            )
        self.preset = preset
        self.input_side = input_side
        self.grid = input_side // preset.patch_side
        d = preset.width

        self.patch_embed = nn.Conv2d(3, d, kernel_size=preset.patch_side, stride=preset.patch_side)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid + 1, d))
        self.blocks = nn.ModuleList(
            _Block(d, preset.heads, preset.mlp_ratio) for _ in range(preset.depth)
        )
        self.norm = nn.LayerNorm(d)
        self._init_weights()

    @classmethod
    def from_preset(cls, name: str, input_side: int) -> "VisionTransformer":
        return cls(get_preset(name), input_side)

    def _init_weights(self):
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def width(self) -> int:
        return self.preset.width

    def forward(self, images: Tensor) -> TokenEmbeddings:
        """Encode a batch of (B, 3, H, W) images, values in [0, 1]."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.input_side or images.shape[3] != self.input_side:
            raise ShapeError(
                f"model is configured for side {self.input_side}, got {images.shape[2]}x{images.shape[3]}"
            )
        x = self.patch_embed(images)  # (B, D, g, g)
        x = x.flatten(2).transpose(1, 2)  # (B, T, D)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return TokenEmbeddings(
            global_token=x[:, 0],
            patch_tokens=x[:, 1:],
            grid_shape=(self.grid, self.grid),
        )


def encode(image: np.ndarray | Tensor, model: VisionTransformer) -> TokenEmbeddings:
    """Deterministic inference-mode encoding of one H x W x 3 image in [0, 1]."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {tuple(image.shape)}")
    batch = image.permute(2, 0, 1).unsqueeze(0).to(dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.inference_mode():
            out = model(batch)
    finally:
        model.train(was_training)
    return TokenEmbeddings(
        global_token=out.global_token.clone(),
        patch_tokens=out.patch_tokens.clone(),
        grid_shape=out.grid_shape,
    )


class ProjectionHead(nn.Module):
    """Per-sensor linear map applied to the global token and to each patch token."""

    def __init__(self, sensor_id: str, in_dim: int, out_dim: Optional[int] = None):
        super().__init__()
        self.sensor_id = sensor_id
        self.linear = nn.Linear(in_dim, out_dim or in_dim)

    @property
    def in_dim(self) -> int:
        return self.linear.in_features

    def forward(self, tokens: TokenEmbeddings) -> TokenEmbeddings:
        if tokens.width != self.in_dim:
            raise ShapeError(
                f"head for sensor {self.sensor_id!r} expects width {self.in_dim}, got {tokens.width}"
            )
        return TokenEmbeddings(
            global_token=self.linear(tokens.global_token),
            patch_tokens=self.linear(tokens.patch_tokens),
            grid_shape=tokens.grid_shape,
        )


def project(tokens: TokenEmbeddings, head: ProjectionHead) -> TokenEmbeddings:
    return head(tokens)


class DinoHead(nn.Module):
    """MLP to a normalized bottleneck, then a linear layer of output prototypes."""

    def __init__(self, in_dim: int, out_dim: int = 4096, hidden_dim: int = 1024, bottleneck_dim: int = 128):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.last_layer = nn.Linear(bottleneck_dim, out_dim, bias=False)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def out_dim(self) -> int:
        return self.last_layer.out_features

    def forward(self, x: Tensor) -> Tensor:
        x = self.mlp(x)
        x = F.normalize(x, dim=-1, eps=1e-6)
        return self.last_layer(x)


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """In-place EMA of every teacher tensor toward the student's value.

    Both modules must be structurally identical; the first mismatched entry is
    reported. Runs outside the gradient path.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"EMA momentum must be in [0, 1], got {momentum}")
    t_sd = teacher.state_dict()
    s_sd = student.state_dict()
    if t_sd.keys() != s_sd.keys():
        missing = sorted(set(t_sd) ^ set(s_sd))
        raise ShapeError(f"teacher/student structure mismatch at parameter {missing[0]!r}")
    with torch.no_grad():
        for name, t in t_sd.items():
            s = s_sd[name]
            if t.shape != s.shape:
                raise ShapeError(
                    f"teacher/student shape mismatch at parameter {name!r}: "
                    f"{tuple(t.shape)} vs {tuple(s.shape)}"
                )
            if t.is_floating_point():
                t.mul_(momentum).add_(s, alpha=1.0 - momentum)
            else:
                t.copy_(s)
    return teacher


def freeze(module: nn.Module) -> nn.Module:
    """Disable gradients and put the module in eval mode."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def cosine_schedule(base: float, final: float, step: int, total_steps: int, warmup_steps: int = 0, warmup_start: float = 0.0) -> float:
    """Linear warmup followed by a half-cosine from base to final."""
    if total_steps <= 0:
        return final
    if warmup_steps > 0 and step < warmup_steps:
        return warmup_start + (base - warmup_start) * step / warmup_steps
    denom = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / denom)
    return final + 0.5 * (base - final) * (1 + math.cos(math.pi * progress))
