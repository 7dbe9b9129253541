"""Vision and text transformers with a toggleable cross-attention path.

The text encoder runs in three modes:

``unimodal``
    self-attention + FFN only; cross-attention sublayers are skipped.
``cross_bidirectional``
    self-attention, then cross-attention over image patch tokens, then FFN.
``cross_causal``
    as above but self-attention is causally masked (used for generation).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

MODES = ("unimodal", "cross_bidirectional", "cross_causal")
PROJECTION_DIM = 512


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class VisionConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    channels: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2


@dataclass
class TextConfig:
    vocab_size: int = 256
    max_len: int = 48
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    cross_dim: int = 128
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.max_len < 3:
            raise ConfigError("max_len must be >= 3 (CLS, one token, SEP)")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")


@dataclass
class ObjectiveConfig:
    temperature_init: float = 0.07
    temperature_min: float = 1e-3
    temperature_max: float = 1.0
    mlm_rate: float = 0.15
    gm_rate: float = 0.6


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(VisionConfig(**d["vision"]), TextConfig(**d["text"]), ObjectiveConfig(**d["objectives"]))


@dataclass
class FeatureSet:
    """Encoder output for a batch: ``cls`` is [B, D], ``tokens`` is [B, L, D]."""

    cls: torch.Tensor
    tokens: torch.Tensor
    attn_maps: Optional[list[torch.Tensor]] = None


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None):
        """``mask`` is boolean, broadcastable to [B, H, Lq, Lk]; True = may attend."""
        B, Lq, D = x.shape
        ctx = x if context is None else context
        Lk = ctx.shape[1]
        q = self.q(x).view(B, Lq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(ctx).view(B, Lk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(ctx).view(B, Lk, self.num_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out(out), attn


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block; the cross-attention sublayer is optional."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, cross_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        if cross_dim is not None:
            self.norm_cross = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, num_heads, kv_dim=cross_dim)
        else:
            self.norm_cross = None
            self.cross_attn = None
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x, mask=None, context=None, capture=None):
        h, _ = self.attn(self.norm1(x), mask=mask)
        x = x + h
        if context is not None:
            if self.cross_attn is None:
                raise ConfigError("block was built without cross-attention")
            h, probs = self.cross_attn(self.norm_cross(x), context=context)
            if capture is not None:
                capture.append(probs.detach())
            x = x + h
        return x + self.mlp(self.norm2(x))


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# Encoders
# --------------------------------------------------------------------------


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.channels, D, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, D))
        self.blocks = nn.ModuleList(Block(D, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(D)
        _init_weights(self)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> FeatureSet:
        cfg = self.cfg
        if images.dim() != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"expected images [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {list(images.shape)}")
        if not torch.isfinite(images).all():
            raise InputError("images contain NaN or Inf")
        # patches flattened row-major over the grid
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return FeatureSet(cls=x[:, 0], tokens=x[:, 1:])


class TextEncoder(nn.Module):
    """Word-level transformer; ``with_cross=False`` builds the plain text-only variant."""

    def __init__(self, cfg: TextConfig, with_cross: bool = True):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.tok_embed = nn.Embedding(cfg.vocab_size, D)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len, D))
        cross_dim = cfg.cross_dim if with_cross else None
        self.blocks = nn.ModuleList(Block(D, cfg.num_heads, cfg.mlp_ratio, cross_dim) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(D)
        _init_weights(self)
        nn.init.trunc_normal_(self.tok_embed.weight, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, ids: torch.Tensor, valid: torch.Tensor, mode: str = "unimodal",
                visual_tokens: Optional[torch.Tensor] = None, capture: bool = False) -> FeatureSet:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode != "unimodal" and visual_tokens is None:
            raise ValueError(f"mode {mode!r} needs visual_tokens for cross-attention")
        if mode == "unimodal" and capture:
            raise ValueError("no cross-attention to capture in unimodal mode")
        B, L = ids.shape
        if L > self.cfg.max_len:
            raise ConfigError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise InputError("token id outside vocabulary")
        x = self.tok_embed(ids) + self.pos_embed[:, :L]
        mask = valid[:, None, None, :]
        if mode == "cross_causal":
            causal = torch.ones(L, L, dtype=torch.bool, device=ids.device).tril()
            mask = mask & causal[None, None]
        context = visual_tokens if mode != "unimodal" else None
        maps: Optional[list[torch.Tensor]] = [] if capture else None
        for blk in self.blocks:
            x = blk(x, mask=mask, context=context, capture=maps)
        x = self.norm(x)
        return FeatureSet(cls=x[:, 0], tokens=x, attn_maps=maps)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = PROJECTION_DIM):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        nn.init.trunc_normal_(self.linear.weight, std=0.02)
        nn.init.zeros_(self.linear.bias)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        return project(cls, self)


def project(cls: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """Linear projection to 512 dims followed by L2 normalization."""
    if not torch.isfinite(cls).all():
        raise InputError("projection input contains NaN or Inf")
    z = head.linear(cls)
    norm = z.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-12).any()):
        raise DegenerateEmbeddingError("projected embedding has (near-)zero norm")
    return z / norm


class DualEncoder(nn.Module):
    """Vision encoder + text encoder with cross-attention and all objective heads.

    The language-model head is tied to the token embedding; only its bias is
    a separate parameter.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.text.cross_dim != cfg.vision.embed_dim:
            raise ConfigError(
                f"text.cross_dim ({cfg.text.cross_dim}) must equal vision.embed_dim ({cfg.vision.embed_dim})")
        self.cfg = cfg
        self.vision = VisionEncoder(cfg.vision)
        self.text = TextEncoder(cfg.text)
        self.image_proj = ProjectionHead(cfg.vision.embed_dim)
        self.text_proj = ProjectionHead(cfg.text.embed_dim)
        self.itm_head = nn.Linear(cfg.text.embed_dim, 2)
        nn.init.trunc_normal_(self.itm_head.weight, std=0.02)
        nn.init.zeros_(self.itm_head.bias)
        self.lm_bias = nn.Parameter(torch.zeros(cfg.text.vocab_size))
        self.log_temp = nn.Parameter(torch.tensor(math.log(cfg.objectives.temperature_init)))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temp.exp()

    def clamp_temperature(self) -> None:
        o = self.cfg.objectives
        with torch.no_grad():
            self.log_temp.clamp_(math.log(o.temperature_min), math.log(o.temperature_max))

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.text.tok_embed.weight.t() + self.lm_bias


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> DualEncoder:
    """Fresh, seed-determined initialization."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = DualEncoder(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def encode_image(model: DualEncoder, images) -> FeatureSet:
    images = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    return model.vision(images)


def encode_text(model: DualEncoder, ids, valid, mode: str = "unimodal", visual_tokens=None,
                capture: bool = False) -> FeatureSet:
    ids = torch.as_tensor(ids, dtype=torch.long)
    valid = torch.as_tensor(valid, dtype=torch.bool)
    return model.text(ids, valid, mode=mode, visual_tokens=visual_tokens, capture=capture)
