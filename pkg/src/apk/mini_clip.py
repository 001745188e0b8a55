"""Miniature CLIP-style dual encoder: a patch ViT and a causal text transformer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .substrate import ConfigError, DimensionError, LayerNorm, Linear, TransformerBlock, trunc_normal_
from .tokenizer import Tokenizer

LOGIT_SCALE_MIN, LOGIT_SCALE_MAX = 1 / 100, 100.0


@dataclass
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    layers: int = 6
    heads: int = 4
    insert_layer: int = 3
    pixel_mean: float = 0.11  # input standardization; the toy scenes are mostly dark background
    pixel_std: float = 0.16

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError("vision.image_size must be divisible by vision.patch_size")
        if not 1 <= self.insert_layer < self.layers:
            raise ConfigError("vision.insert_layer must satisfy 1 <= insert_layer < layers")
        if self.width % self.heads:
            raise ConfigError("vision.width must be divisible by vision.heads")
        if self.pixel_std <= 0:
            raise ConfigError("vision.pixel_std must be > 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TextConfig:
    vocab_size: int = 512
    context_length: int = 32
    width: int = 64
    layers: int = 4
    heads: int = 4

    def validate(self):
        if self.context_length < 4:
            raise ConfigError("text.context_length must be >= 4")
        if self.width % self.heads:
            raise ConfigError("text.width must be divisible by text.heads")


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionConfig, embed_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.width
        self.patch_proj = Linear(3 * cfg.patch_size**2, d)
        self.class_embedding = nn.Parameter(trunc_normal_(torch.empty(d)))
        self.position_embedding = nn.Parameter(trunc_normal_(torch.empty(cfg.num_patches + 1, d)))
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.heads) for _ in range(cfg.layers))
        self.ln_post = LayerNorm(d)
        self.proj = nn.Parameter(trunc_normal_(torch.empty(d, embed_dim)))

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        s, p = self.cfg.image_size, self.cfg.patch_size
        if images.shape[-3:] != (s, s, 3):
            raise DimensionError(f"expected images of shape [..., {s}, {s}, 3], got {tuple(images.shape)}")
        lead = images.shape[:-3]
        g = s // p
        x = images.reshape(*lead, g, p, g, p, 3).transpose(-4, -3)
        return x.reshape(*lead, g * g, p * p * 3)

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """E0: projected patches plus their learnable position embedding."""
        images = images.to(self.position_embedding.dtype)
        x = (self.patchify(images) - self.cfg.pixel_mean) / self.cfg.pixel_std
        return self.patch_proj(x) + self.position_embedding[1:]

    def class_token(self, lead_shape) -> torch.Tensor:
        cls = self.class_embedding + self.position_embedding[0]
        return cls.expand(*lead_shape, 1, cls.shape[-1])

    def pool(self, seq: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.ln_post(seq[..., 0, :]) @ self.proj, dim=-1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        e0 = self.patch_embed(images)
        x = torch.cat([self.class_token(e0.shape[:-2]), e0], dim=-2)
        for blk in self.blocks:
            x = blk(x)
        return self.pool(x)


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextConfig, embed_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.token_embedding = nn.Parameter(trunc_normal_(torch.empty(cfg.vocab_size, cfg.width)))
        self.position_embedding = nn.Parameter(trunc_normal_(torch.empty(cfg.context_length, cfg.width)))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.layers))
        self.ln_final = LayerNorm(cfg.width)
        self.text_projection = nn.Parameter(trunc_normal_(torch.empty(cfg.width, embed_dim)))

    def embed_words(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        length = ids.shape[-1]
        if length > self.cfg.context_length:
            raise ValueError(f"sequence length {length} exceeds context_length {self.cfg.context_length}")
        return self.token_embedding[ids] + self.position_embedding[:length]

    def forward(self, ids: torch.Tensor, eos_id: int) -> torch.Tensor:
        x = self.embed_words(ids)
        for blk in self.blocks:
            x = blk(x, causal=True)
        x = self.ln_final(x)
        eos = (ids == eos_id).int().argmax(dim=-1)
        pooled = torch.gather(x, -2, eos[..., None, None].expand(*eos.shape, 1, x.shape[-1])).squeeze(-2)
        return F.normalize(pooled @ self.text_projection, dim=-1)


class MiniCLIP(nn.Module):
    """Dual encoder with a learnable temperature.

    ``logit_scale`` holds log(1/tau); the exponentiated scale is clamped to
    ``[1/100, 100]``.
    """

    def __init__(self, vision: VisionConfig, text: TextConfig, tokenizer: Tokenizer, embed_dim: Optional[int] = None):
        super().__init__()
        if len(tokenizer) > text.vocab_size:
            raise ConfigError(f"tokenizer has {len(tokenizer)} tokens but text.vocab_size={text.vocab_size}")
        if tokenizer.context_length != text.context_length:
            raise ConfigError("tokenizer and text config disagree on context_length")
        embed_dim = embed_dim or vision.width
        self.tokenizer = tokenizer
        self.visual = VisionEncoder(vision, embed_dim)
        self.text = TextEncoder(text, embed_dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    @property
    def scale(self) -> torch.Tensor:
        return self.logit_scale.exp().clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)

    def tokenize(self, texts: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.tokenizer.encode(t) for t in texts], dtype=torch.long,
                            device=self.logit_scale.device)

    def embed_words(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text.embed_words(ids)

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text(ids, self.tokenizer.eos_id)

    def encode_texts(self, texts: Sequence[str], chunk: int = 256) -> torch.Tensor:
        if not texts:
            return torch.zeros(0, self.text.text_projection.shape[1], dtype=self.logit_scale.dtype)
        return torch.cat([self.encode_text(self.tokenize(texts[i:i + chunk])) for i in range(0, len(texts), chunk)])

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.visual.patch_embed(images)

    def encode_image_plain(self, images: torch.Tensor) -> torch.Tensor:
        return self.visual(images)

    def similarity(self, z_img: torch.Tensor, z_text: torch.Tensor) -> torch.Tensor:
        return z_img @ z_text.transpose(-1, -2)

