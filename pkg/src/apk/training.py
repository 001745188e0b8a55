"""Freeze-scheduled optimization: backbone warmup, contrastive prompt tuning,
then triplet-loss tuning of the interaction module alone."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

from .corpus import Split
from .knowledge import ActionKnowledge, ValidationError
from .model import GROUPS, ActionPromptModel, KnowledgeInputs
from .retrieval import ENRICHMENT_MODES, RerankConfig, RetrievalReport, enrich_text, evaluate, first_hit_ranks, full_order
from .substrate import ConfigError, NumericError, group_digests

log = logging.getLogger(__name__)

STAGES = ("warmup0", "stage1", "stage2")
STAGE_GROUPS: Dict[str, FrozenSet[str]] = {
    "warmup0": frozenset({"vision_backbone", "text_encoder", "word_embeddings", "temperature"}),
    "stage1": frozenset({"triplet_encoder", "adapter", "visual_prompts", "deep_prompts", "aim", "temperature"}),
    "stage2": frozenset({"aim"}),
}
STAGE_LOSS = {"warmup0": "contrastive", "stage1": "contrastive", "stage2": "triplet"}
LOSSES = ("contrastive", "triplet", "combined")
CONDITIONING = ("own", "candidates", "both")


@dataclass
class TripletLossConfig:
    margin: float = 0.2
    distance: str = "cosine"
    negative_mining: str = "hardest"  # hardest | random
    mining_pool: int = 4
    mining_scope: str = "split"  # split | batch
    mining_space: str = "caption"  # caption | base

    def validate(self):
        if not self.margin > 0:
            raise ConfigError("triplet.margin must be > 0")
        if self.distance != "cosine":
            raise ConfigError("triplet.distance supports only 'cosine'")
        if self.negative_mining not in ("hardest", "random"):
            raise ConfigError("triplet.negative_mining must be 'hardest' or 'random'")
        if self.mining_scope not in ("split", "batch"):
            raise ConfigError("triplet.mining_scope must be 'split' or 'batch'")
        if self.mining_space not in ("caption", "base"):
            raise ConfigError("triplet.mining_space must be 'caption' or 'base'")
        if self.mining_pool < 1:
            raise ConfigError("triplet.mining_pool must be >= 1")


@dataclass
class StagePlan:
    stage: str
    trainable_groups: FrozenSet[str]
    loss: str
    epochs: int = 4
    lr: float = 1e-5
    batch_size: int = 128
    optimizer: str = "sgd"  # sgd | adam
    momentum: float = 0.9
    weight_decay: float = 0.0
    text_enrichment: str = "none"  # enrichment applied to captions on the text side
    conditioning: str = "both"  # contrastive image side: own | candidates | both
    augment: bool = False  # random shift of training images

    def __post_init__(self):
        self.trainable_groups = frozenset(self.trainable_groups)

    @classmethod
    def default(cls, stage: str, **kw) -> "StagePlan":
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return cls(stage, STAGE_GROUPS[stage], STAGE_LOSS[stage], **kw)

    @property
    def frozen_groups(self) -> FrozenSet[str]:
        return frozenset(GROUPS) - self.trainable_groups

    def validate(self, strict: bool = True):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        unknown = self.trainable_groups - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        if strict and self.stage in ("stage1", "stage2") and self.trainable_groups != STAGE_GROUPS[self.stage]:
            raise ConfigError(f"{self.stage} must train exactly {sorted(STAGE_GROUPS[self.stage])}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 2:
            raise ConfigError("epochs >= 0, lr > 0 and batch_size >= 2 are required")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"conditioning must be one of {CONDITIONING}")
        if self.text_enrichment not in ENRICHMENT_MODES:
            raise ConfigError(f"text_enrichment must be one of {ENRICHMENT_MODES}")


# --------------------------------------------------------------------------
# losses


def contrastive_loss(z_img: torch.Tensor, z_text: torch.Tensor, tau: Optional[float] = None,
                     scale: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Symmetric InfoNCE: image-to-text plus text-to-image cross-entropy.

    Pass either the temperature ``tau`` or the logit ``scale`` (= 1/tau).
    """
    if z_img.dim() != 2 or z_img.shape != z_text.shape:
        raise ValidationError(f"expected matching [B, d] features, got {tuple(z_img.shape)} and {tuple(z_text.shape)}")
    b = z_img.shape[0]
    if b < 2:
        raise ValidationError("contrastive loss needs a batch of at least 2 pairs")
    if scale is None:
        scale = 1.0 / (0.07 if tau is None else tau)
    return logits_contrastive_loss(scale * (z_img @ z_text.T))


def logits_contrastive_loss(logits: torch.Tensor) -> torch.Tensor:
    target = torch.arange(logits.shape[0])
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def triplet_loss(d_p, d_n, cfg: Optional[TripletLossConfig] = None):
    """``max(d_p - d_n + margin, 0)``; works on floats or tensors."""
    margin = (cfg or TripletLossConfig()).margin
    if isinstance(d_p, torch.Tensor) or isinstance(d_n, torch.Tensor):
        return torch.clamp(d_p - d_n + margin, min=0.0)
    return max(d_p - d_n + margin, 0.0)


def hardest_negatives(sim: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Column index of the most similar non-positive entry in each row."""
    return sim.masked_fill(positive, -math.inf).argmax(dim=-1)


# --------------------------------------------------------------------------
# data


@dataclass
class StageData:
    """Frozen-backbone features for one split.  Rebuilt whenever the backbone changes."""

    split: Split
    images: torch.Tensor  # [G, H, W, 3]
    e0: torch.Tensor  # [G, M, d]
    image_base: torch.Tensor  # [G, d]
    text: Dict[str, torch.Tensor]  # enrichment mode -> [N, d]
    texts: Dict[str, List[str]]
    knowledge: KnowledgeInputs  # [N, ...]
    caption_image: torch.Tensor  # [N]

    def __len__(self):
        return len(self.split)


def check_knowledge(split: Split, knowledge: Mapping[str, ActionKnowledge]) -> None:
    missing = [c for c in split.caption_ids if c not in knowledge]
    if missing:
        raise ValidationError(f"{len(missing)} {split.name} captions lack knowledge, e.g. {missing[:3]}")


def prepare(model: ActionPromptModel, split: Split, knowledge: Mapping[str, ActionKnowledge],
            modes: Sequence[str] = ("none",)) -> StageData:
    check_knowledge(split, knowledge)
    records = [knowledge[c] for c in split.caption_ids]
    budget = model.tokenizer.budget
    texts = {m: [enrich_text(c, r, m, budget) for c, r in zip(split.captions, records)] for m in set(modes) | {"none"}}
    with torch.no_grad():
        images = torch.from_numpy(split.images)
        return StageData(
            split, images, model.patch_embed(images), model.encode_image_plain(images),
            {m: model.encode_texts(t) for m, t in texts.items()}, texts,
            model.knowledge_inputs(records), torch.tensor(split.caption_image, dtype=torch.long))


# --------------------------------------------------------------------------
# per-batch objectives


def _stage_text(data: StageData, plan: StagePlan, idx: torch.Tensor) -> torch.Tensor:
    return data.text[plan.text_enrichment][idx]


def augment_images(images: torch.Tensor, gen: torch.Generator, max_shift: int = 2) -> torch.Tensor:
    """Small edge-padded translation per image.

    A whole-image shift keeps the glyph at the same offset inside the subject
    cell, so the action is preserved.  Mirroring would move the glyph and is
    therefore not offered.
    """
    b, h, w, _ = images.shape
    if not max_shift:
        return images
    pad = F.pad(images.permute(0, 3, 1, 2), (max_shift,) * 4, mode="replicate").permute(0, 2, 3, 1)
    dy, dx = torch.randint(0, 2 * max_shift + 1, (2, b), generator=gen)
    rows = (dy[:, None] + torch.arange(h)[None, :])[:, :, None].expand(b, h, w)
    cols = (dx[:, None] + torch.arange(w)[None, :])[:, None, :].expand(b, h, w)
    return pad[torch.arange(b)[:, None, None], rows, cols]


def batch_e0(model: ActionPromptModel, data: StageData, plan: StagePlan, imgs: torch.Tensor,
             gen: torch.Generator) -> torch.Tensor:
    if not plan.augment:
        return data.e0[imgs]
    with torch.no_grad():
        return model.patch_embed(augment_images(data.images[imgs], gen))


def batch_contrastive(model: ActionPromptModel, data: StageData, plan: StagePlan, idx: torch.Tensor,
                      gen: torch.Generator) -> torch.Tensor:
    g = data.caption_image[idx]
    z = model.encode_image_prompted(batch_e0(model, data, plan, g, gen), data.knowledge.index(idx))
    return contrastive_loss(z, _stage_text(data, plan, idx), scale=model.clip.scale)


def image_level(scores: torch.Tensor, caption_image: torch.Tensor, n_images: int) -> torch.Tensor:
    """Reduce caption columns to image columns by taking each image's best caption."""
    out = torch.full((scores.shape[0], n_images), -math.inf, dtype=scores.dtype)
    return out.scatter_reduce(1, caption_image.expand_as(scores), scores, reduce="amax")


def conditioned_scores(model: ActionPromptModel, data: StageData, plan: StagePlan, idx: torch.Tensor,
                       cfg: TripletLossConfig, gen: torch.Generator):
    """Re-ranking scores of matched pairs and of mined mismatched pairs.

    A mismatched pair puts an image together with another caption's text *and*
    that caption's knowledge, exactly as re-ranking scores a candidate.
    Returns (positive [B], i2t negatives [B, m], t2i negatives [B, m]).
    """
    b = len(idx)
    g = data.caption_image[idx]
    if cfg.mining_scope == "split":
        # candidates come from the whole training gallery, as pre-selection does at inference
        cap_pool, img_pool = torch.arange(len(data)), torch.arange(data.e0.shape[0])
        same_i2t = g[:, None] == data.caption_image[None, :]  # [B, N]
        same_t2i = torch.arange(len(img_pool))[None, :] == g[:, None]  # [B, G]
    else:
        cap_pool, img_pool = idx, g
        same_i2t = g[:, None] == g[None, :]
        same_t2i = same_i2t
    if bool(same_i2t.all()):
        raise ValidationError("need at least two distinct images to mine negatives")
    m = min(cfg.mining_pool, int((~same_i2t).sum(1).min()), int((~same_t2i).sum(1).min()))
    if cfg.negative_mining == "hardest" and cfg.mining_space == "caption":
        # nearest captions in text space: same entities, different action
        t = data.text["none"]
        s_i2t = t[idx] @ t[cap_pool].T
        s_t2i = image_level(t[idx] @ t.T, data.caption_image, data.e0.shape[0])[:, img_pool]
    elif cfg.negative_mining == "hardest":
        s_i2t = data.image_base[g] @ data.text["none"][cap_pool].T
        s_t2i = data.text["none"][idx] @ data.image_base[img_pool].T
    else:
        s_i2t = torch.rand(same_i2t.shape, generator=gen)
        s_t2i = torch.rand(same_t2i.shape, generator=gen)
    neg_cap = cap_pool[torch.topk(s_i2t.masked_fill(same_i2t, -math.inf), m, dim=1).indices]  # [B, m]
    neg_img = img_pool[torch.topk(s_t2i.masked_fill(same_t2i, -math.inf), m, dim=1).indices]  # [B, m]
    rep = idx.repeat_interleave(m)
    imgs = torch.cat([g, g.repeat_interleave(m), neg_img.reshape(-1)])
    caps = torch.cat([idx, neg_cap.reshape(-1), rep])
    z = model.encode_image_prompted(batch_e0(model, data, plan, imgs, gen), data.knowledge.index(caps))
    sim = (z * _stage_text(data, plan, caps)).sum(-1)
    return sim[:b], sim[b:b + b * m].reshape(b, m), sim[b + b * m:].reshape(b, m)


def batch_triplet(model: ActionPromptModel, data: StageData, plan: StagePlan, idx: torch.Tensor,
                  cfg: TripletLossConfig, gen: torch.Generator) -> torch.Tensor:
    """Hinge loss on cosine distance in both directions against the hardest mined negative."""
    pos, neg_i2t, neg_t2i = conditioned_scores(model, data, plan, idx, cfg, gen)
    d_p = 1 - pos
    d_n_i2t = 1 - neg_i2t.max(dim=1).values
    d_n_t2i = 1 - neg_t2i.max(dim=1).values
    return (triplet_loss(d_p, d_n_i2t, cfg) + triplet_loss(d_p, d_n_t2i, cfg)).mean()


def batch_candidate_contrastive(model: ActionPromptModel, data: StageData, plan: StagePlan, idx: torch.Tensor,
                                cfg: TripletLossConfig, gen: torch.Generator) -> torch.Tensor:
    """Symmetric cross-entropy where each row's alternatives are mined candidates
    scored under their own knowledge."""
    pos, neg_i2t, neg_t2i = conditioned_scores(model, data, plan, idx, cfg, gen)
    scale = model.clip.scale
    target = torch.zeros(len(idx), dtype=torch.long)
    loss = 0.0
    for neg in (neg_i2t, neg_t2i):
        loss = loss + F.cross_entropy(scale * torch.cat([pos[:, None], neg], dim=1), target)
    return loss


def batch_warmup(model: ActionPromptModel, data: StageData, plan: StagePlan, idx: torch.Tensor) -> torch.Tensor:
    """Plain dual-encoder contrastive loss; optionally also against enriched captions."""
    z = model.encode_image_plain(data.images[data.caption_image[idx]])
    loss = 0.0
    for mode in sorted({"none", plan.text_enrichment}):
        texts = [data.texts[mode][i] for i in idx.tolist()]
        loss = loss + contrastive_loss(z, model.encode_text(model.clip.tokenize(texts)), scale=model.clip.scale)
    return loss


# --------------------------------------------------------------------------
# stage runner


@dataclass
class TrainingLog:
    records: List[dict] = field(default_factory=list)
    path: Optional[Path] = None

    def add(self, **rec) -> None:
        rec = {k: (round(v, 8) if isinstance(v, float) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")

    def epoch_losses(self, stage: str) -> List[float]:
        return [r["loss"] for r in self.records if r["stage"] == stage and r.get("step") == "epoch"]

    def rsums(self, stage: str) -> List[float]:
        return [r["rsum"] for r in self.records if r["stage"] == stage and "rsum" in r]


@dataclass
class StageResult:
    plan: StagePlan
    log: TrainingLog
    best_rsum: float
    best_epoch: int
    checkpoint: Optional[Path]
    seconds: float


def _optimizer(plan: StagePlan, params):
    if plan.optimizer == "adam":
        return torch.optim.Adam(params, lr=plan.lr, weight_decay=plan.weight_decay)
    return torch.optim.SGD(params, lr=plan.lr, momentum=plan.momentum, weight_decay=plan.weight_decay)


def _assert_frozen(before: Mapping[str, str], after: Mapping[str, str], frozen: FrozenSet[str], stage: str):
    changed = sorted(g for g in frozen if before[g] != after[g])
    if changed:
        raise AssertionError(f"{stage}: frozen groups changed: {changed}")


def validation_rsum(model: ActionPromptModel, plan: StagePlan, val: Split, knowledge, rerank: RerankConfig) -> float:
    if plan.stage == "warmup0":
        with torch.no_grad():
            was = model.training
            model.eval()
            images = torch.from_numpy(val.images)
            s = model.encode_image_plain(images) @ model.encode_texts(val.captions).T
            model.train(was)
        caps = [set() for _ in val.image_ids]
        for c, g in enumerate(val.caption_image):
            caps[g].add(c)
        i2t = first_hit_ranks([full_order(r).tolist() for r in s], caps)
        t2i = first_hit_ranks([full_order(r).tolist() for r in s.T], [{g} for g in val.caption_image])
        return RetrievalReport.from_ranks("image-to-text", i2t).rsum + RetrievalReport.from_ranks("text-to-image", t2i).rsum
    return evaluate(model, val, knowledge, rerank).rsum


def run_stage(plan: StagePlan, model: ActionPromptModel, train: Split, knowledge: Mapping[str, ActionKnowledge],
              val: Optional[Split] = None, out_dir=None, seed: int = 0,
              triplet_cfg: Optional[TripletLossConfig] = None, rerank: Optional[RerankConfig] = None,
              log_: Optional[TrainingLog] = None, strict: bool = True) -> StageResult:
    """Train the groups in ``plan.trainable_groups``; everything else stays bit-identical.

    With a validation split, the best-Rsum epoch (epoch 0 = untrained) is
    checkpointed as ``{stage}-best.ckpt`` and restored at the end.
    """
    plan.validate(strict)
    triplet_cfg = triplet_cfg or TripletLossConfig()
    triplet_cfg.validate()
    rerank = rerank or RerankConfig(k=min(20, len(val) if val is not None else 20))
    t0 = time.time()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tlog = log_ or TrainingLog(path=out_dir / "training.log" if out_dir else None)
    check_knowledge(train, knowledge)
    if val is not None:
        check_knowledge(val, knowledge)

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model.set_trainable(plan.trainable_groups)
    modes = {"none", plan.text_enrichment}
    data = None if plan.stage == "warmup0" else prepare(model, train, knowledge, modes)
    if data is None:
        data = _warmup_data(model, train, knowledge, plan)
    before = group_digests(model.param_groups())
    params = model.trainable_parameters()
    opt = _optimizer(plan, params)
    ckpt = out_dir / f"{plan.stage}-best.ckpt" if out_dir else None
    best_state = None
    best_rsum, best_epoch = -math.inf, -1

    def checkpoint(epoch: int):
        nonlocal best_rsum, best_epoch, best_state
        if val is None:
            return
        rsum = validation_rsum(model, plan, val, knowledge, rerank)
        tlog.add(stage=plan.stage, epoch=epoch, step="val", rsum=rsum)
        if rsum > best_rsum:
            best_rsum, best_epoch = rsum, epoch
            best_state = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}
            if ckpt is not None:
                model.save(ckpt, {"stage": plan.stage, "epoch": epoch, "rsum": rsum})

    checkpoint(0)
    n = len(data)
    step = 0
    model.train()
    for epoch in range(1, plan.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for s in range(0, n, plan.batch_size):
            idx = perm[s:s + plan.batch_size]
            if len(idx) < 2:
                continue
            loss = _batch_loss(model, data, plan, idx, triplet_cfg, gen)
            if not torch.isfinite(loss):
                _dump_nonfinite(model, out_dir, plan, epoch, step)
                raise NumericError(f"{plan.stage}: non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
            step += 1
            tlog.add(stage=plan.stage, epoch=epoch, step=step, loss=loss.item())
        tlog.add(stage=plan.stage, epoch=epoch, step="epoch", loss=total / max(batches, 1))
        _assert_frozen(before, group_digests(model.param_groups()), plan.frozen_groups, plan.stage)
        checkpoint(epoch)

    if best_state is not None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name in best_state:
                    p.copy_(best_state[name])
    _assert_frozen(before, group_digests(model.param_groups()), plan.frozen_groups, plan.stage)
    if ckpt is not None and val is None:
        model.save(ckpt, {"stage": plan.stage, "epoch": plan.epochs})
    model.eval()
    return StageResult(plan, tlog, best_rsum, best_epoch, ckpt, time.time() - t0)


def _warmup_data(model, split, knowledge, plan) -> StageData:
    records = [knowledge[c] for c in split.caption_ids]
    budget = model.tokenizer.budget
    texts = {m: [enrich_text(c, r, m, budget) for c, r in zip(split.captions, records)]
             for m in {"none", plan.text_enrichment}}
    empty = torch.zeros(0)
    return StageData(split, torch.from_numpy(split.images), empty, empty, {}, texts, None,
                     torch.tensor(split.caption_image, dtype=torch.long))


def _batch_loss(model, data, plan, idx, triplet_cfg, gen) -> torch.Tensor:
    if plan.stage == "warmup0":
        return batch_warmup(model, data, plan, idx)
    loss = 0.0
    if plan.loss in ("contrastive", "combined"):
        if plan.conditioning in ("own", "both"):
            loss = batch_contrastive(model, data, plan, idx, gen)
        if plan.conditioning in ("candidates", "both"):
            loss = loss + batch_candidate_contrastive(model, data, plan, idx, triplet_cfg, gen)
    if plan.loss in ("triplet", "combined"):
        loss = loss + batch_triplet(model, data, plan, idx, triplet_cfg, gen)
    return loss


def _dump_nonfinite(model, out_dir, plan, epoch, step) -> None:
    if out_dir is None:
        return
    path = out_dir / f"{plan.stage}-nonfinite.ckpt"
    model.save(path, {"stage": plan.stage, "epoch": epoch, "step": step, "reason": "non-finite loss"})
    log.error("non-finite loss; state dumped to %s", path)


# --------------------------------------------------------------------------
# schedules


@dataclass
class Schedule:
    """Plans for each stage plus the variant baselines."""

    warmup0: StagePlan = field(default_factory=lambda: StagePlan.default(
        "warmup0", epochs=10, lr=1e-4, batch_size=32, optimizer="adam", text_enrichment="triplets+states"))
    stage1: StagePlan = field(default_factory=lambda: StagePlan.default("stage1"))
    stage2: StagePlan = field(default_factory=lambda: StagePlan.default("stage2"))
    triplet: TripletLossConfig = field(default_factory=TripletLossConfig)

    def validate(self):
        for p in (self.warmup0, self.stage1, self.stage2):
            p.validate()
        self.triplet.validate()

    def one_stage(self) -> StagePlan:
        """Single contrastive stage over every non-backbone group."""
        return StagePlan("stage1", STAGE_GROUPS["stage1"], "contrastive", self.stage1.epochs + self.stage2.epochs,
                         self.stage1.lr, self.stage1.batch_size, self.stage1.optimizer, self.stage1.momentum,
                         self.stage1.weight_decay, self.stage1.text_enrichment, self.stage1.conditioning)

    def combined(self) -> StagePlan:
        """Single stage with contrastive and triplet losses summed."""
        p = self.one_stage()
        p.loss = "combined"
        return p


@dataclass
class TwoStageResult:
    checkpoint: Path
    stage1: StageResult
    stage2: StageResult
    comparisons: Dict[str, float] = field(default_factory=dict)


def run_two_stage(model: ActionPromptModel, train: Split, knowledge: Mapping[str, ActionKnowledge], val: Split,
                  out_dir, schedule: Optional[Schedule] = None, seed: int = 0,
                  rerank: Optional[RerankConfig] = None, compare_one_stage: bool = False,
                  compare_combined: bool = False, warmup_checkpoint=None) -> TwoStageResult:
    """Stage 1 then stage 2 from a warmed-up backbone; optionally also trains the
    one-stage and combined-loss variants from the same starting point and
    records their validation Rsum under ``comparisons``."""
    schedule = schedule or Schedule()
    schedule.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if warmup_checkpoint is not None:
        model.load_weights(warmup_checkpoint, ["vision_backbone", "text_encoder", "word_embeddings", "temperature"])
    start = {n: p.detach().clone() for n, p in model.named_parameters()}
    tlog = TrainingLog(path=out_dir / "training.log")
    r1 = run_stage(schedule.stage1, model, train, knowledge, val, out_dir, seed, schedule.triplet, rerank, tlog)
    r2 = run_stage(schedule.stage2, model, train, knowledge, val, out_dir, seed + 1, schedule.triplet, rerank, tlog)
    final = out_dir / "final.ckpt"
    model.save(final, {"stage": "final"})
    result = TwoStageResult(final, r1, r2, {"two-stage": r2.best_rsum})
    variants = [("one-stage", schedule.one_stage(), compare_one_stage),
                ("combined", schedule.combined(), compare_combined)]
    for name, plan, wanted in variants:
        if not wanted:
            continue
        other = _fresh_copy(model, start)
        res = run_stage(plan, other, train, knowledge, val, out_dir / name, seed, schedule.triplet, rerank,
                        TrainingLog(path=out_dir / "training.log"), strict=False)
        result.comparisons[name] = res.best_rsum
    return result


def _fresh_copy(model: ActionPromptModel, state: Mapping[str, torch.Tensor]) -> ActionPromptModel:
    other = ActionPromptModel(model.tokenizer, model.vision_cfg, model.text_cfg, model.prompt_cfg, model.aim_cfg)
    with torch.no_grad():
        for name, p in other.named_parameters():
            p.copy_(state[name])
    return other
