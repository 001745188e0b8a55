"""Small differentiable building blocks shared by every model component.

Everything is a thin layer over torch autograd. Modules accept arbitrary
leading batch dimensions; attention works on ``[..., L, d]``.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def trunc_normal_(t: torch.Tensor, std: float = INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    if weight.dim() != 2:
        raise DimensionError(f"weight must be 2-d, got shape {tuple(weight.shape)}")
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"x trailing axis ({x.shape[-1]}) does not match weight input axis ({weight.shape[0]})"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"bias shape {tuple(bias.shape)} does not match weight output axis ({weight.shape[1]})"
        )
    out = x @ weight
    return out + bias if bias is not None else out


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ConfigError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"gain/shift must have shape ({d},)")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + shift


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(trunc_normal_(torch.empty(d_in, d_out)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.shift = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.shift, self.eps)


def _masked_scores(scores: torch.Tensor, key_mask: Optional[torch.Tensor], causal: bool) -> torch.Tensor:
    # scores: [..., H, Lq, Lk]; key_mask: [..., Lk] with True = attend
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    if causal:
        lq, lk = scores.shape[-2:]
        tri = torch.ones(lq, lk, dtype=torch.bool, device=scores.device).tril()
        scores = scores.masked_fill(~tri, float("-inf"))
    return scores


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections.

    ``forward`` returns the projected output and the head-averaged
    attention map ``[..., Lq, Lk]``.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigError(f"width {d} is not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.q_proj = Linear(d, d)
        self.k_proj = Linear(d, d)
        self.v_proj = Linear(d, d)
        self.out_proj = Linear(d, d)

    def _split(self, x):
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.d // self.heads).transpose(-3, -2)

    def attention(self, query, key, key_mask=None, causal=False):
        """Per-head attention weights ``[..., H, Lq, Lk]``."""
        if query.shape[-1] != self.d or key.shape[-1] != self.d:
            raise DimensionError(f"attention width mismatch: expected {self.d}")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d // self.heads)
        return torch.softmax(_masked_scores(scores, key_mask, causal), dim=-1)

    def forward(self, query, key, value, key_mask=None, causal=False) -> Tuple[torch.Tensor, torch.Tensor]:
        attn = self.attention(query, key, key_mask, causal)
        v = self._split(self.v_proj(value))
        out = (attn @ v).transpose(-3, -2)
        out = out.reshape(*out.shape[:-2], self.d)
        return self.out_proj(out), attn.mean(dim=-3)


def multi_head_attention(query, key, value, heads: int, module: Optional[MultiHeadAttention] = None):
    """Functional entry point; builds a fresh module when none is supplied."""
    if query.shape[-1] % heads:
        raise ConfigError(f"width {query.shape[-1]} is not divisible by heads={heads}")
    if module is None:
        module = MultiHeadAttention(query.shape[-1], heads).to(query.dtype)
    return module(query, key, value)


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc = Linear(d, hidden)
        self.proj = Linear(hidden, d)

    def forward(self, x):
        return self.proj(F.gelu(self.fc(x)))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: ``x + attn(LN(x))`` then ``+ mlp(LN(.))``."""

    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ln_2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d)

    def zero_branches_(self):
        with torch.no_grad():
            for p in (self.attn.out_proj.weight, self.attn.out_proj.bias, self.mlp.proj.weight, self.mlp.proj.bias):
                p.zero_()
        return self

    def forward(self, x, key_mask=None, causal=False):
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, key_mask=key_mask, causal=causal)[0]
        return x + self.mlp(self.ln_2(x))


def transformer_block(x: torch.Tensor, block: TransformerBlock) -> torch.Tensor:
    return block(x)


# --------------------------------------------------------------------------
# parameter groups


@dataclass
class ParamGroup:
    name: str
    parameters: Dict[str, nn.Parameter] = field(default_factory=dict)
    frozen: bool = False

    def set_frozen(self, frozen: bool):
        self.frozen = frozen
        for p in self.parameters.values():
            p.requires_grad_(not frozen)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters):
            t = self.parameters[name].detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()


def group_digests(groups: Mapping[str, ParamGroup]) -> Dict[str, str]:
    return {name: g.digest() for name, g in groups.items()}


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst elementwise relative error between autograd and central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dividing by noise.
    """
    if x.dtype != torch.float64:
        raise NumericError("grad_check requires a float64 input")
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ValueError("f must be scalar-valued")
    if not torch.isfinite(out).all():
        raise NumericError("f produced a non-finite value")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    numeric = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = f(flat.view_as(x)).item()
            flat[i] = orig - step
            minus = f(flat.view_as(x)).item()
            flat[i] = orig
            numeric.view(-1)[i] = (plus - minus) / (2 * step)
    if not (torch.isfinite(analytic).all() and torch.isfinite(numeric).all()):
        raise NumericError("non-finite gradient encountered")
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=x.dtype))
    return float(((analytic - numeric).abs() / denom).max())


@contextlib.contextmanager
def _swapped(module: nn.Module, qualname: str, value: torch.Tensor):
    owner_name, _, attr = qualname.rpartition(".")
    owner = module.get_submodule(owner_name) if owner_name else module
    original = owner._parameters.pop(attr)
    setattr(owner, attr, value)
    try:
        yield
    finally:
        delattr(owner, attr)
        owner._parameters[attr] = original


def grad_check_module(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    names: Optional[Iterable[str]] = None,
    step: float = 1e-5,
) -> Dict[str, float]:
    """Gradient-check each named parameter of ``module`` in turn.

    ``loss_fn`` is re-evaluated with the parameter replaced by a probe tensor;
    all other parameters stay fixed. Returns ``{name: worst relative error}``.
    """
    params = dict(module.named_parameters())
    results = {}
    for name in names if names is not None else list(params):
        base = params[name].detach().clone()

        def f(v, name=name):
            with _swapped(module, name, v):
                return loss_fn()

        results[name] = grad_check(f, base, step)
    return results


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "apk-ckpt-1"


def save_checkpoint(path, groups: Mapping[str, ParamGroup], extra: Optional[dict] = None,
                    files: Optional[Mapping[str, bytes]] = None) -> None:
    """Write a zip archive of raw little-endian float32 tensors plus a JSON manifest."""
    manifest = {"format": CHECKPOINT_FORMAT, "groups": {}, "extra": extra or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for gname in sorted(groups):
            g = groups[gname]
            entry = {"frozen": g.frozen, "params": {}}
            for pname in sorted(g.parameters):
                arr = g.parameters[pname].detach().cpu().numpy().astype("<f4")
                member = f"{gname}/{pname}"
                zf.writestr(member, arr.tobytes())
                entry["params"][pname] = {"shape": list(arr.shape), "member": member}
            manifest["groups"][gname] = entry
        for name, data in (files or {}).items():
            zf.writestr(name, data)
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray], Dict[str, bytes]]:
    """Return ``(manifest, {"group/param": array}, {other_member: bytes})``."""
    tensors, other = {}, {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        members = set()
        for gname, entry in manifest["groups"].items():
            for pname, meta in entry["params"].items():
                raw = zf.read(meta["member"])
                tensors[f"{gname}/{pname}"] = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
                members.add(meta["member"])
        for name in zf.namelist():
            if name != "manifest.json" and name not in members:
                other[name] = zf.read(name)
    return manifest, tensors, other


def load_checkpoint_into(path, groups: Mapping[str, ParamGroup], strict: bool = True) -> dict:
    manifest, tensors, _ = read_checkpoint(path)
    for gname, g in groups.items():
        for pname, p in g.parameters.items():
            key = f"{gname}/{pname}"
            if key not in tensors:
                if strict:
                    raise KeyError(f"checkpoint {path} is missing {key}")
                continue
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise DimensionError(f"{key}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr).to(p.dtype))
        if gname in manifest["groups"]:
            g.set_frozen(manifest["groups"][gname]["frozen"])
    return manifest
