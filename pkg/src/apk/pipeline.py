"""End-to-end orchestration shared by the command line and the acceptance checks."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import torch

from .config import RunConfig
from .corpus import SPLITS, Split, build_corpus, load_manifest, load_split
from .interaction import AimConfig
from .knowledge import ActionKnowledge, AnnotationSummary, annotate_corpus, load_knowledge
from .model import ActionPromptModel
from .prompts import PromptConfig, render_state_prompt
from .retrieval import EvalResult, RerankConfig, enrich_text, evaluate
from .substrate import ConfigError
from .tokenizer import Tokenizer
from .training import STAGE_GROUPS, StagePlan, StageResult, TrainingLog, run_stage

log = logging.getLogger(__name__)

BACKBONE_GROUPS = tuple(sorted(STAGE_GROUPS["warmup0"]))
TRAINING_MODES = ("two-stage", "one-stage", "combined")


# --------------------------------------------------------------------------
# data preparation


def write_captions(corpus_dir, out_path) -> int:
    """Collect every split's captions into one JSON-lines file for annotation."""
    lines = []
    for split in SPLITS:
        path = Path(corpus_dir) / f"{split}.manifest"
        if path.exists():
            lines += [json.dumps({"caption_id": it["caption_id"], "caption": it["caption"]}) + "\n"
                      for it in load_manifest(corpus_dir, split)]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(lines), encoding="utf-8")
    return len(lines)


def gen_corpus(cfg: RunConfig, out_dir=None) -> Dict[str, list]:
    out_dir = Path(out_dir or cfg.paths.corpus)
    manifests = build_corpus(out_dir, cfg.corpus.counts, cfg.corpus.seed, cfg.corpus.image_size)
    write_captions(out_dir, cfg.paths.captions)
    return manifests


def gen_knowledge(cfg: RunConfig, captions=None, out=None, backend=None) -> AnnotationSummary:
    backend = backend or cfg.llm.backend_instance()
    return annotate_corpus(captions or cfg.paths.captions, out or cfg.paths.knowledge, backend,
                           cfg.llm.parallelism, cfg.paths.llm_cache)


def vocabulary_texts(knowledge: Mapping[str, ActionKnowledge], prompts: PromptConfig) -> List[str]:
    texts = [prompts.state_template, prompts.handcraft_template]
    for rec in knowledge.values():
        texts.append(enrich_text(rec.caption, rec, "triplets+states"))
        for t, desc in zip(rec.triplets, rec.state_descriptions):
            texts.append(render_state_prompt(prompts.state_template, t, desc))
    return texts


def build_tokenizer(knowledge: Mapping[str, ActionKnowledge], cfg: RunConfig) -> Tokenizer:
    """Word-level vocabulary over captions, knowledge and prompt templates."""
    try:
        return Tokenizer.build(vocabulary_texts(knowledge, cfg.prompts), cfg.text.context_length,
                               cfg.text.vocab_size)
    except ValueError as exc:
        raise ConfigError(f"text.vocab_size: {exc}") from exc


@dataclass
class Data:
    train: Split
    val: Split
    test: Split
    knowledge: Dict[str, ActionKnowledge]

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def load_data(cfg: RunConfig, corpus=None, knowledge=None) -> Data:
    corpus = Path(corpus or cfg.paths.corpus)
    size = cfg.vision.image_size
    splits = [load_split(corpus, s, size) for s in SPLITS]
    return Data(*splits, load_knowledge(knowledge or cfg.paths.knowledge))


# --------------------------------------------------------------------------
# model variants


@dataclass(frozen=True)
class Variant:
    """A named model configuration relative to the run config."""

    name: str
    prompts: Mapping = field(default_factory=dict)
    aim: Mapping = field(default_factory=dict)
    enrichment: Optional[str] = None  # None keeps rerank.enrichment

    def configs(self, cfg: RunConfig) -> Tuple[PromptConfig, AimConfig, RerankConfig]:
        p = dataclasses.replace(cfg.prompts, **self.prompts)
        a = dataclasses.replace(cfg.aim, **self.aim)
        r = dataclasses.replace(cfg.rerank, enrichment=self.enrichment or cfg.rerank.enrichment)
        return p, a, r


FULL = Variant("full")
# visual prompt tuning alone: no knowledge prompts, hence nothing for the
# interaction module to attend to, and no knowledge appended to the text
NO_KNOWLEDGE = Variant("w/o action knowledge", {"triplet": "off", "state": False, "visual": True},
                       {"enabled": False}, "none")
CAT = Variant("replace AIM with CAT", aim={"enabled": False})


def new_model(cfg: RunConfig, tokenizer: Tokenizer, variant: Variant = FULL) -> ActionPromptModel:
    p, a, _ = variant.configs(cfg)
    return ActionPromptModel(tokenizer, cfg.vision, cfg.text, p, a)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


# --------------------------------------------------------------------------
# training


def train_warmup(cfg: RunConfig, data: Data, out_dir) -> Tuple[ActionPromptModel, StageResult]:
    """Stage 0: plain contrastive training of the mini backbone from scratch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    model = new_model(cfg, build_tokenizer(data.knowledge, cfg))
    plan = cfg.train.warmup0.plan("warmup0")
    res = run_stage(plan, model, data.train, data.knowledge, data.val, out_dir, cfg.seed,
                    cfg.train.triplet, cfg.rerank, TrainingLog(path=out_dir / "training.log"))
    return model, res


def _plans(cfg: RunConfig, variant_aim: AimConfig, mode: str, rerank: RerankConfig) -> List[StagePlan]:
    sched = cfg.train.schedule()
    s1, s2 = sched.stage1, sched.stage2
    for p in (s1, s2):
        p.text_enrichment = rerank.enrichment
    if mode == "one-stage":
        p = sched.one_stage()
        p.text_enrichment = rerank.enrichment
        return [p]
    if mode == "combined":
        p = sched.combined()
        p.text_enrichment = rerank.enrichment
        return [p]
    if not variant_aim.enabled:
        # stage 2 only trains the interaction module; without it the budget goes to stage 1
        s1.epochs += s2.epochs
        return [s1]
    return [s1, s2]


@dataclass
class VariantRun:
    variant: str
    mode: str
    model: ActionPromptModel
    stages: List[StageResult]
    rerank: RerankConfig
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def train_variant(cfg: RunConfig, data: Data, warm_checkpoint, out_dir, variant: Variant = FULL,
                  mode: str = "two-stage", seed: Optional[int] = None) -> VariantRun:
    """Prompt training on top of a frozen warmed-up backbone."""
    if mode not in TRAINING_MODES:
        raise ConfigError(f"training mode must be one of {TRAINING_MODES}")
    t0 = time.time()
    seed = cfg.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p, a, r = variant.configs(cfg)
    seed_everything(seed)
    model = ActionPromptModel.load(warm_checkpoint, groups=BACKBONE_GROUPS, prompts=p, aim=a)
    tlog = TrainingLog(path=out_dir / "training.log")
    results = []
    for i, plan in enumerate(_plans(cfg, a, mode, r)):
        results.append(run_stage(plan, model, data.train, data.knowledge, data.val, out_dir, seed + i,
                                 cfg.train.triplet, r, tlog, strict=mode == "two-stage"))
    final = out_dir / "final.ckpt"
    model.save(final, {"stage": "final", "variant": variant.name, "mode": mode})
    return VariantRun(variant.name, mode, model, results, r, final, time.time() - t0)


def evaluate_run(run: VariantRun, data: Data, split: str = "test", lam=None) -> EvalResult:
    return evaluate(run.model, data.split(split), data.knowledge, run.rerank, lam)


def warmup_result(model: ActionPromptModel, data: Data, cfg: RunConfig, split: str = "test") -> EvalResult:
    """Plain-path retrieval of the frozen backbone; re-ranking disabled."""
    res = evaluate(model, data.split(split), data.knowledge, cfg.rerank)
    return EvalResult(res.base_i2t, res.base_t2i, res.base_i2t, res.base_t2i, {**res.config, "rerank": False})
