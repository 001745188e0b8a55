"""Action triplet prompts, action state prompts and the shared prompt adapter."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .substrate import ConfigError, LayerNorm, Linear, TransformerBlock, trunc_normal_

log = logging.getLogger(__name__)

STATE_PROMPT_TEMPLATE = "Fine-grained state description of action triplet <{s}, {a}, {o}> is {description}"
HANDCRAFT_TEMPLATE = "A photo capturing a {s} performing {a} in relation to {o}."


@dataclass
class PromptConfig:
    triplet: str = "learned"  # learned | handcraft | off
    state: bool = True
    visual: bool = True
    k_max: int = 8
    n_visual: int = 4
    n_deep: int = 4
    bottleneck: int = 0  # 0 -> width // 8
    shared_adapter: bool = True
    triplet_layers: int = 2
    triplet_heads: int = 4
    state_template: str = STATE_PROMPT_TEMPLATE
    handcraft_template: str = HANDCRAFT_TEMPLATE

    def validate(self):
        if self.triplet not in ("learned", "handcraft", "off"):
            raise ConfigError("prompts.triplet must be one of learned, handcraft, off")
        if self.k_max < 1:
            raise ConfigError("prompts.k_max must be >= 1")
        if self.visual and (self.n_visual < 1 or self.n_deep < 1):
            raise ConfigError("prompts.n_visual and prompts.n_deep must be >= 1 when visual prompts are on")
        if self.bottleneck < 0 or self.triplet_layers < 0:
            raise ConfigError("prompts.bottleneck and prompts.triplet_layers must be >= 0")

    def bottleneck_for(self, width: int) -> int:
        return self.bottleneck or max(1, width // 8)


def render_state_prompt(template: str, triplet, description: str) -> str:
    return template.format(s=triplet.subject, a=triplet.action, o=triplet.object, description=description)


class TripletEncoder(nn.Module):
    """Projects concatenated [subject; action; object] embeddings to width d and
    contextualizes the triplets of one caption with each other.

    No positional encoding: the output is equivariant to triplet order.
    """

    def __init__(self, word_width: int, d: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.in_proj = Linear(3 * word_width, d)
        self.blocks = nn.ModuleList(TransformerBlock(d, heads) for _ in range(layers))

    def forward(self, e_delta: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.in_proj(e_delta)
        any_valid = mask.any(dim=-1, keepdim=True)
        key_mask = mask | ~any_valid  # fully-masked rows attend to padding, then get zeroed
        for blk in self.blocks:
            x = blk(x, key_mask=key_mask)
        return x * mask[..., None].to(x.dtype)


class PromptAdapter(nn.Module):
    """``ReLU(LN(p) @ W_down) @ W_up`` applied row-wise."""

    def __init__(self, d: int, bottleneck: int):
        super().__init__()
        if bottleneck >= d:
            raise ConfigError("adapter bottleneck must be smaller than the width")
        self.ln = LayerNorm(d)
        self.w_down = nn.Parameter(trunc_normal_(torch.empty(d, bottleneck)))
        self.w_up = nn.Parameter(trunc_normal_(torch.empty(bottleneck, d)))

    def forward(self, p: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        out = torch.relu(self.ln(p) @ self.w_down) @ self.w_up
        return out if mask is None else out * mask[..., None].to(out.dtype)


@dataclass
class PromptBundle:
    p_t: torch.Tensor  # [..., K, d]
    p_s: torch.Tensor
    p0_t: torch.Tensor
    p0_s: torch.Tensor
    mask_t: torch.Tensor  # [..., K] bool
    mask_s: torch.Tensor

    @property
    def valid_mask(self) -> torch.Tensor:
        return self.mask_t | self.mask_s


class DeepPromptSet(nn.Module):
    """Input-level visual prompts plus one independent prompt set per later layer."""

    def __init__(self, d: int, n_visual: int, n_deep: int, later_layers: int):
        super().__init__()
        self.visual = nn.Parameter(trunc_normal_(torch.empty(n_visual, d)))
        self.deep = nn.ParameterList(nn.Parameter(trunc_normal_(torch.empty(n_deep, d))) for _ in range(later_layers))
