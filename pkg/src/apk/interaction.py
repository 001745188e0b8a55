"""Action-aware adaptive interaction: fuse patch tokens with adapted prompts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .substrate import ConfigError, LayerNorm, Linear, MultiHeadAttention, trunc_normal_


@dataclass
class AimConfig:
    lam: float = 0.7
    heads: int = 4
    fusion_mlp_hidden: int = 0  # 0 -> width
    enabled: bool = True
    residual: bool = True
    interleave: bool = False

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"aim.lam must lie in [0, 1], got {self.lam}")
        if self.heads < 1 or self.fusion_mlp_hidden < 0:
            raise ConfigError("aim.heads must be >= 1 and aim.fusion_mlp_hidden >= 0")


@dataclass
class FusionTrace:
    A_t: torch.Tensor
    A_s: torch.Tensor
    A_combined: torch.Tensor
    V_tilde: torch.Tensor

    def dump(self, path, index: int = 0) -> None:
        def rows(t):
            t = t[index] if t.dim() == 3 else t
            return [[round(float(v), 6) for v in r] for r in t]

        payload = {"A_t": rows(self.A_t), "A_s": rows(self.A_s), "A_combined": rows(self.A_combined),
                   "V_tilde_norms": [round(float(v), 6) for v in (self.V_tilde[index] if self.V_tilde.dim() == 3
                                                                     else self.V_tilde).norm(dim=-1)]}
        Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


class FusionMLP(nn.Module):
    """``Linear -> ReLU -> Linear`` over the concatenated value streams.

    Weights use fan-in scaled init so the fused values start at the scale of
    their inputs rather than being shrunk twice by the small default init.
    """

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc = Linear(2 * d, hidden)
        self.proj = Linear(hidden, d)
        with torch.no_grad():
            trunc_normal_(self.fc.weight, std=(2 / (2 * d)) ** 0.5)
            trunc_normal_(self.proj.weight, std=(1 / hidden) ** 0.5)

    def forward(self, v_t, v_s):
        return self.proj(torch.relu(self.fc(torch.cat([v_t, v_s], dim=-1))))


class AdaptiveInteraction(nn.Module):
    """Patch tokens query each prompt family; the prompt-informed patches then
    self-attend, and the two attention maps are blended by ``lam`` over fused values.

    Cross- and self-attention weights are shared between the two families.
    """

    def __init__(self, d: int, cfg: AimConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.ln_query = LayerNorm(d)
        self.ln_prompt = LayerNorm(d)
        self.cross = MultiHeadAttention(d, cfg.heads)
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads)
        self.fusion = FusionMLP(d, cfg.fusion_mlp_hidden or d)

    def informed(self, e0: torch.Tensor, prompts: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Cross-attention of patches (queries) over one prompt family; identity when
        the family has no valid rows."""
        any_valid = mask.any(dim=-1)
        safe_mask = mask | ~any_valid[..., None]
        kv = self.ln_prompt(prompts)
        out, _ = self.cross(self.ln_query(e0), kv, kv, key_mask=safe_mask)
        return e0 + out * any_valid[..., None, None].to(out.dtype)

    def self_attend(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (values, head-averaged attention)."""
        h = self.ln_self(x)
        attn = self.self_attn.attention(h, h).mean(dim=-3)
        return self.self_attn.v_proj(h), attn

    def forward(self, e0, p0_t, p0_s, mask_t, mask_s, lam: Optional[float] = None):
        lam = self.cfg.lam if lam is None else lam
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
        v_t, a_t = self.self_attend(self.informed(e0, p0_t, mask_t))
        v_s, a_s = self.self_attend(self.informed(e0, p0_s, mask_s))
        v = self.fusion(v_t, v_s)
        a = lam * a_t + (1 - lam) * a_s
        v_tilde = a @ v
        return v_tilde, FusionTrace(a_t, a_s, a, v_tilde)


def aim_fuse(module: AdaptiveInteraction, e0, p0_t, p0_s, mask_t, mask_s, cfg: Optional[AimConfig] = None):
    return module(e0, p0_t, p0_s, mask_t, mask_s, None if cfg is None else cfg.lam)


def assemble_sequence(cls_token: torch.Tensor, v_tilde: torch.Tensor, p_v: Optional[torch.Tensor],
                      interleave: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """Build ``[cls, v_1..v_M, P_1..P_N]``; returns (sequence, prompt positions)."""
    lead = v_tilde.shape[:-2]
    m = v_tilde.shape[-2]
    if p_v is None or p_v.shape[-2] == 0:
        return torch.cat([cls_token, v_tilde], dim=-2), torch.zeros(0, dtype=torch.long)
    n = p_v.shape[-2]
    p_v = p_v.expand(*lead, n, p_v.shape[-1])
    if not interleave:
        seq = torch.cat([cls_token, v_tilde, p_v], dim=-2)
        return seq, torch.arange(1 + m, 1 + m + n)
    parts, positions, pos = [cls_token], [], 1
    for i in range(max(m, n)):
        if i < m:
            parts.append(v_tilde[..., i:i + 1, :])
            pos += 1
        if i < n:
            parts.append(p_v[..., i:i + 1, :])
            positions.append(pos)
            pos += 1
    return torch.cat(parts, dim=-2), torch.tensor(positions, dtype=torch.long)


def pack_rows(x: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Move valid rows to the front and trim to the longest valid count in the batch."""
    n = int(mask.sum(dim=-1).max()) if mask.numel() else 0
    order = torch.argsort((~mask).to(torch.int8), dim=-1, stable=True)[..., :n]
    rows = torch.gather(x, -2, order[..., None].expand(*order.shape, x.shape[-1]))
    return rows, torch.gather(mask, -1, order)


def concat_baseline(cls_token, e0, p0_t, p0_s, mask_t, mask_s, p_v: Optional[torch.Tensor]):
    """Sequence ``[cls, E0, p0_t, p0_s, P_v]`` with padded prompt rows dropped or masked.

    Returns (sequence, key mask or None, prompt positions of P_v).
    """
    lead = e0.shape[:-2]
    t_rows, t_mask = pack_rows(p0_t, mask_t)
    s_rows, s_mask = pack_rows(p0_s, mask_s)
    parts = [cls_token, e0, t_rows, s_rows]
    ones = torch.ones(*lead, 1 + e0.shape[-2], dtype=torch.bool)
    masks = [ones, t_mask, s_mask]
    if p_v is not None and p_v.shape[-2]:
        parts.append(p_v.expand(*lead, *p_v.shape))
        masks.append(torch.ones(*lead, p_v.shape[-2], dtype=torch.bool))
    seq = torch.cat(parts, dim=-2)
    key_mask = torch.cat(masks, dim=-1)
    n = 0 if p_v is None else p_v.shape[-2]
    positions = torch.arange(seq.shape[-2] - n, seq.shape[-2])
    return seq, (None if bool(key_mask.all()) else key_mask), positions
