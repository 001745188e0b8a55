"""The prompted dual encoder: mini CLIP backbone plus action prompts and interaction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn

from .interaction import AdaptiveInteraction, AimConfig, FusionTrace, assemble_sequence, concat_baseline
from .knowledge import ActionKnowledge
from .mini_clip import MiniCLIP, TextConfig, VisionConfig
from .prompts import DeepPromptSet, PromptAdapter, PromptBundle, PromptConfig, TripletEncoder, render_state_prompt
from .substrate import ConfigError, ParamGroup, load_checkpoint_into, read_checkpoint, save_checkpoint
from .tokenizer import Tokenizer, split_words, truncate_words

log = logging.getLogger(__name__)

GROUPS = (
    "vision_backbone", "text_encoder", "word_embeddings", "temperature",
    "triplet_encoder", "adapter", "visual_prompts", "deep_prompts", "aim",
)
BACKBONE_GROUPS = ("vision_backbone", "text_encoder", "word_embeddings")


def group_of(name: str) -> str:
    if name.startswith("clip.visual."):
        return "vision_backbone"
    if name.startswith(("clip.text.token_embedding", "clip.text.position_embedding")):
        return "word_embeddings"
    if name.startswith("clip.text."):
        return "text_encoder"
    if name == "clip.logit_scale":
        return "temperature"
    if name.startswith("triplet_encoder."):
        return "triplet_encoder"
    if name.startswith("adapter"):
        return "adapter"
    if name == "prompts.visual":
        return "visual_prompts"
    if name.startswith("prompts.deep."):
        return "deep_prompts"
    if name.startswith("aim."):
        return "aim"
    raise KeyError(f"parameter {name} belongs to no group")


@dataclass
class KnowledgeInputs:
    """Frozen-encoder features of a batch of knowledge records, padded to ``k_max``."""

    e_delta: torch.Tensor  # [B, K, 3w] mean-pooled word embeddings of (s, a, o)
    states: torch.Tensor  # [B, K, d] encoded state prompts
    handcraft: torch.Tensor  # [B, K, d] encoded hand-crafted triplet sentences
    mask: torch.Tensor  # [B, K]

    def index(self, idx) -> "KnowledgeInputs":
        return KnowledgeInputs(*(getattr(self, f.name)[idx] for f in fields(self)))

    def __len__(self):
        return self.mask.shape[0]

    @staticmethod
    def cat(items: Sequence["KnowledgeInputs"]) -> "KnowledgeInputs":
        return KnowledgeInputs(*(torch.cat([getattr(i, f.name) for i in items]) for f in fields(KnowledgeInputs)))


class ActionPromptModel(nn.Module):
    def __init__(self, tokenizer: Tokenizer, vision: VisionConfig = None, text: TextConfig = None,
                 prompts: PromptConfig = None, aim: AimConfig = None):
        super().__init__()
        self.vision_cfg = vision or VisionConfig()
        self.text_cfg = text or TextConfig()
        self.prompt_cfg = prompts or PromptConfig()
        self.aim_cfg = aim or AimConfig()
        for c in (self.vision_cfg, self.text_cfg, self.prompt_cfg, self.aim_cfg):
            c.validate()
        d = self.vision_cfg.width
        self.clip = MiniCLIP(self.vision_cfg, self.text_cfg, tokenizer, embed_dim=d)
        pc = self.prompt_cfg
        self.triplet_encoder = TripletEncoder(self.text_cfg.width, d, pc.triplet_layers, pc.triplet_heads)
        t = pc.bottleneck_for(d)
        self.adapter = PromptAdapter(d, t)
        self.adapter_s = None if pc.shared_adapter else PromptAdapter(d, t)
        later = self.vision_cfg.layers - self.vision_cfg.insert_layer
        self.prompts = DeepPromptSet(d, pc.n_visual, pc.n_deep, later)
        self.aim = AdaptiveInteraction(d, self.aim_cfg)
        self.refresh_freeze_flags({g: False for g in GROUPS})

    # ------------------------------------------------------------------ groups

    @property
    def tokenizer(self) -> Tokenizer:
        return self.clip.tokenizer

    def param_groups(self) -> Dict[str, ParamGroup]:
        groups = {g: ParamGroup(g, frozen=self._frozen.get(g, False)) for g in GROUPS}
        for name, p in self.named_parameters():
            groups[group_of(name)].parameters[name] = p
        return groups

    def refresh_freeze_flags(self, frozen: Dict[str, bool]):
        self._frozen = dict(frozen)
        for g in self.param_groups().values():
            g.set_frozen(self._frozen.get(g.name, False))

    def set_trainable(self, trainable: Iterable[str]):
        trainable = set(trainable)
        unknown = trainable - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        self.refresh_freeze_flags({g: g not in trainable for g in GROUPS})

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for g in self.param_groups().values() if not g.frozen for p in g.parameters.values()]

    # --------------------------------------------------------------- knowledge

    def _field_embedding(self, texts: List[str]) -> torch.Tensor:
        ids = self.clip.tokenize(texts)
        emb = self.clip.embed_words(ids)
        content = (ids != self.tokenizer.pad_id) & (ids != self.tokenizer.bos_id) & (ids != self.tokenizer.eos_id)
        w = content.to(emb.dtype)[..., None]
        return (emb * w).sum(-2) / w.sum(-2).clamp_min(1.0)

    def encode_state_texts(self, texts: List[str]) -> torch.Tensor:
        """Frozen text-encoder features; never carries gradient."""
        budget = self.tokenizer.budget
        for i, t in enumerate(texts):
            if len(split_words(t)) > budget:
                log.warning("state prompt exceeds %d tokens and is truncated: %r", budget, t[:60])
                texts[i] = truncate_words(t, budget)
        with torch.no_grad():
            return self.clip.encode_texts(texts).detach()

    def knowledge_inputs(self, knowledge: Sequence[ActionKnowledge]) -> KnowledgeInputs:
        pc = self.prompt_cfg
        k, w, d = pc.k_max, self.text_cfg.width, self.vision_cfg.width
        dtype = self.clip.logit_scale.dtype
        b = len(knowledge)
        mask = torch.zeros(b, k, dtype=torch.bool)
        slots, fields_, state_txt, hand_txt = [], [], [], []
        for i, rec in enumerate(knowledge):
            for j, (t, desc) in enumerate(zip(rec.triplets[:k], rec.state_descriptions[:k])):
                mask[i, j] = True
                slots.append((i, j))
                fields_.extend(t.as_list())
                state_txt.append(render_state_prompt(pc.state_template, t, desc))
                hand_txt.append(pc.handcraft_template.format(s=t.subject, a=t.action, o=t.object))
        e_delta = torch.zeros(b, k, 3 * w, dtype=dtype)
        states = torch.zeros(b, k, d, dtype=dtype)
        hand = torch.zeros(b, k, d, dtype=dtype)
        if slots:
            ii = torch.tensor([s[0] for s in slots])
            jj = torch.tensor([s[1] for s in slots])
            e_delta = e_delta.index_put((ii, jj), self._field_embedding(fields_).reshape(len(slots), 3 * w))
            if pc.state:
                states[ii, jj] = self.encode_state_texts(state_txt)
            if pc.triplet == "handcraft":
                hand[ii, jj] = self.encode_state_texts(hand_txt)
        return KnowledgeInputs(e_delta, states, hand, mask)

    def prompt_bundle(self, inputs: KnowledgeInputs) -> PromptBundle:
        pc = self.prompt_cfg
        mask = inputs.mask
        none = torch.zeros_like(mask)
        if pc.triplet == "learned":
            mask_t = mask
            p_t = self.triplet_encoder(inputs.e_delta, mask)
        elif pc.triplet == "handcraft":
            mask_t, p_t = mask, inputs.handcraft
        else:
            mask_t, p_t = none, torch.zeros_like(inputs.states)
        mask_s = mask if pc.state else none
        p_s = inputs.states * mask_s[..., None].to(inputs.states.dtype)
        adapter_s = self.adapter_s or self.adapter
        return PromptBundle(p_t, p_s, self.adapter(p_t, mask_t), adapter_s(p_s, mask_s), mask_t, mask_s)

    def encode_triplet_prompts(self, knowledge: ActionKnowledge) -> torch.Tensor:
        inputs = self.knowledge_inputs([knowledge])
        return self.triplet_encoder(inputs.e_delta, inputs.mask)[0]

    def encode_state_prompts(self, knowledge: ActionKnowledge) -> torch.Tensor:
        return self.knowledge_inputs([knowledge]).states[0]

    # ------------------------------------------------------------------ vision

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.clip.patch_embed(images)

    def encode_image_plain(self, images: torch.Tensor) -> torch.Tensor:
        return self.clip.encode_image_plain(images)

    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        return self.clip.encode_text(ids)

    def encode_texts(self, texts: Sequence[str]) -> torch.Tensor:
        return self.clip.encode_texts(list(texts))

    def encode_image_prompted(self, e0: torch.Tensor, inputs: Optional[KnowledgeInputs], lam: Optional[float] = None,
                              return_trace: bool = False):
        """Prompted image features from patch embeddings ``e0`` [B, M, d]."""
        visual = self.clip.visual
        b = e0.shape[0]
        if inputs is None:
            inputs = self.empty_inputs(b)
        bundle = self.prompt_bundle(inputs)
        cls = visual.class_token(e0.shape[:-2])
        p_v = self.prompts.visual if self.prompt_cfg.visual else None
        trace: Optional[FusionTrace] = None
        key_mask = None
        if self.aim_cfg.enabled:
            v_tilde, trace = self.aim(e0, bundle.p0_t, bundle.p0_s, bundle.mask_t, bundle.mask_s, lam)
            tokens = e0 + v_tilde if self.aim_cfg.residual else v_tilde
            seq, positions = assemble_sequence(cls, tokens, p_v, self.aim_cfg.interleave)
        else:
            seq, key_mask, positions = concat_baseline(cls, e0, bundle.p0_t, bundle.p0_s,
                                                       bundle.mask_t, bundle.mask_s, p_v)
        z = self.run_layers(seq, positions, key_mask)
        return (z, trace) if return_trace else z

    def run_layers(self, seq: torch.Tensor, positions: torch.Tensor, key_mask=None) -> torch.Tensor:
        """All vision blocks; blocks after the insert layer see their own prompt tokens."""
        visual = self.clip.visual
        start = self.vision_cfg.insert_layer
        for i, blk in enumerate(visual.blocks):
            if i >= start and len(positions):
                seq = self._replace_prompts(seq, positions, self.prompts.deep[i - start])
            seq = blk(seq, key_mask=key_mask)
        return visual.pool(seq)

    @staticmethod
    def _replace_prompts(seq, positions, prompt):
        if prompt.shape[0] == len(positions):
            seq = seq.clone()
            seq[..., positions, :] = prompt.expand(*seq.shape[:-2], *prompt.shape)
            return seq
        # differing count: prompt tokens must sit at the tail
        keep = seq[..., : int(positions[0]), :]
        return torch.cat([keep, prompt.expand(*seq.shape[:-2], *prompt.shape)], dim=-2)

    def empty_inputs(self, b: int) -> KnowledgeInputs:
        k, w, d = self.prompt_cfg.k_max, self.text_cfg.width, self.vision_cfg.width
        dtype = self.clip.logit_scale.dtype
        return KnowledgeInputs(torch.zeros(b, k, 3 * w, dtype=dtype), torch.zeros(b, k, d, dtype=dtype),
                               torch.zeros(b, k, d, dtype=dtype), torch.zeros(b, k, dtype=torch.bool))

    # ------------------------------------------------------------- persistence

    def config_dict(self) -> dict:
        return {"vision": asdict(self.vision_cfg), "text": asdict(self.text_cfg),
                "prompts": asdict(self.prompt_cfg), "aim": asdict(self.aim_cfg)}

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"model": self.config_dict(), **(extra or {})}
        save_checkpoint(path, self.param_groups(), meta, {"vocab.txt": self.tokenizer.dumps().encode()})

    @classmethod
    def load(cls, path, groups: Optional[Iterable[str]] = None, **overrides) -> "ActionPromptModel":
        """Rebuild from a checkpoint; ``overrides`` replace whole config sections
        (e.g. ``aim=AimConfig(lam=0.3)``).  With ``groups``, only those groups are
        restored and the rest keep their fresh initialization."""
        manifest, _, files = read_checkpoint(path)
        cfg = manifest["extra"]["model"]
        tok = Tokenizer(files["vocab.txt"].decode().split("\n")[:-1], cfg["text"]["context_length"])
        kwargs = dict(vision=VisionConfig(**cfg["vision"]), text=TextConfig(**cfg["text"]),
                      prompts=PromptConfig(**cfg["prompts"]), aim=AimConfig(**cfg["aim"]))
        kwargs.update(overrides)
        model = cls(tok, **kwargs)
        model.load_weights(path, groups)
        return model

    def load_weights(self, path, groups: Optional[Iterable[str]] = None) -> None:
        """Load parameters (all groups, or only ``groups``) and the stored freeze flags."""
        wanted = self.param_groups()
        if groups is not None:
            wanted = {g: wanted[g] for g in groups}
        load_checkpoint_into(path, wanted)
        self._frozen.update({g.name: g.frozen for g in wanted.values()})

