"""Ablation suites: prompt types, interaction module, training schedule, lambda sweep."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .config import RunConfig
from .knowledge import ActionKnowledge
from .model import ActionPromptModel
from .pipeline import CAT, FULL, NO_KNOWLEDGE, Data, Variant, evaluate_run, train_variant, warmup_result
from .retrieval import KS, EvalResult
from .substrate import ConfigError

log = logging.getLogger(__name__)

SUITES = ("prompts", "aim", "stages", "lambda")
LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9)
ATTRIBUTE_VERBS = frozenset({"is", "are", "has", "have"})

# (action triplet, hand-craft triplet, action state, visual prompts) -> prompt settings
PROMPT_ROWS: List[Tuple[Tuple[bool, bool, bool, bool], Dict]] = [
    ((True, False, False, False), {"triplet": "learned", "state": False, "visual": False}),
    ((False, True, False, False), {"triplet": "handcraft", "state": False, "visual": False}),
    ((False, False, True, False), {"triplet": "off", "state": True, "visual": False}),
    ((True, False, True, False), {"triplet": "learned", "state": True, "visual": False}),
    ((True, False, True, True), {"triplet": "learned", "state": True, "visual": True}),
]


@dataclass
class Table:
    suite: str
    columns: List[str]
    rows: List[List[str]] = field(default_factory=list)
    results: List[Optional[EvalResult]] = field(default_factory=list)

    def add(self, labels: Sequence[str], res: EvalResult) -> None:
        self.rows.append(list(labels) + metric_cells(res))
        self.results.append(res)

    def tsv(self) -> str:
        return "\n".join("\t".join(r) for r in [self.columns] + self.rows) + "\n"

    def pretty(self) -> str:
        table = [self.columns] + self.rows
        widths = [max(len(r[i]) for r in table) for i in range(len(self.columns))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(self.columns))
        return "\n".join([f"[{self.suite}]", fmt(self.columns), rule] + [fmt(r) for r in self.rows]) + "\n"


METRIC_COLUMNS = [f"i2t R@{k}" for k in KS] + [f"t2i R@{k}" for k in KS] + ["Rsum"]


def metric_cells(res: EvalResult) -> List[str]:
    cells = [f"{100 * res.i2t.r_at[k]:.1f}" for k in KS] + [f"{100 * res.t2i.r_at[k]:.1f}" for k in KS]
    return cells + [f"{res.rsum:.1f}"]


def _mark(flag: bool) -> str:
    return "x" if flag else ""


def strip_attributes(knowledge: Dict[str, ActionKnowledge]) -> Tuple[Dict[str, ActionKnowledge], int]:
    """Drop attribute triplets (``<girl, is, small>``-style); returns (knowledge, removed count)."""
    out, removed = {}, 0
    for cid, rec in knowledge.items():
        keep = [(t, s) for t, s in zip(rec.triplets, rec.state_descriptions) if t.action not in ATTRIBUTE_VERBS]
        removed += len(rec.triplets) - len(keep)
        out[cid] = ActionKnowledge(cid, rec.caption, [t for t, _ in keep], [s for _, s in keep])
    return out, removed


class Ablation:
    """Trains each needed variant once and shares runs between suites."""

    def __init__(self, cfg: RunConfig, data: Data, warm_checkpoint, out_dir, split: str = "test"):
        self.cfg, self.data, self.warm = cfg, data, Path(warm_checkpoint)
        self.out_dir = Path(out_dir)
        self.split = split
        self._cache: Dict[Tuple, EvalResult] = {}

    def _key(self, variant: Variant, mode: str, lam: float, tag: str) -> Tuple:
        p, a, r = variant.configs(self.cfg)
        a = dataclasses.replace(a, lam=lam)
        return (repr(p), repr(a), r.enrichment, mode, tag)

    def run(self, variant: Variant, mode: str = "two-stage", lam: Optional[float] = None,
            data: Optional[Data] = None, tag: str = "") -> EvalResult:
        lam = self.cfg.aim.lam if lam is None else lam
        key = self._key(variant, mode, lam, tag)
        if key not in self._cache:
            cfg = dataclasses.replace(self.cfg, aim=dataclasses.replace(self.cfg.aim, lam=lam))
            sub = self.out_dir / "variants" / f"v{len(self._cache):02d}"
            log.info("training variant %s (%s) into %s", variant.name, mode, sub)
            run = train_variant(cfg, data or self.data, self.warm, sub, variant, mode)
            self._cache[key] = evaluate_run(run, data or self.data, self.split)
            log.info("%s (%s, lambda=%.1f): %s", variant.name, mode, lam, self._cache[key].summary())
        return self._cache[key]

    def baseline(self) -> EvalResult:
        key = ("baseline",)
        if key not in self._cache:
            model = ActionPromptModel.load(self.warm)
            self._cache[key] = warmup_result(model, self.data, self.cfg, self.split)
        return self._cache[key]

    # ------------------------------------------------------------------ suites

    def prompts(self) -> Table:
        t = Table("prompts", ["Action Triplet", "Hand-Craft Triplet", "Action State", "Vis"] + METRIC_COLUMNS)
        for flags, settings in PROMPT_ROWS:
            t.add([_mark(f) for f in flags], self.run(Variant("prompts", settings)))
        return t

    def aim(self) -> Table:
        t = Table("aim", ["Method"] + METRIC_COLUMNS)
        t.add(["Baseline"], self.baseline())
        t.add(["w/o action knowledge"], self.run(NO_KNOWLEDGE))
        stripped, removed = strip_attributes(self.data.knowledge)
        if removed:
            res = self.run(FULL, data=dataclasses.replace(self.data, knowledge=stripped), tag="no-attr")
        else:
            log.info("knowledge holds no attribute triplets; 'w/o attribute knowledge' equals the full model")
            res = self.run(FULL)
        t.add(["w/o attribute knowledge"], res)
        t.add(["replace AIM with CAT"], self.run(CAT))
        t.add(["Ours"], self.run(FULL))
        return t

    def stages(self) -> Table:
        t = Table("stages", ["Method"] + METRIC_COLUMNS)
        t.add(["Baseline"], self.baseline())
        t.add(["combined training"], self.run(FULL, "combined"))
        t.add(["one-stage training"], self.run(FULL, "one-stage"))
        t.add(["two-stage training"], self.run(FULL, "two-stage"))
        return t

    def lam(self) -> Table:
        t = Table("lambda", ["lambda"] + METRIC_COLUMNS)
        for lam in LAMBDAS:
            t.add([f"{lam:.1f}"], self.run(FULL, lam=lam))
        return t

    def suite(self, name: str) -> Table:
        fn: Dict[str, Callable[[], Table]] = {"prompts": self.prompts, "aim": self.aim, "stages": self.stages,
                                              "lambda": self.lam}
        if name not in fn:
            raise ConfigError(f"unknown ablation suite {name!r}; choose from {SUITES}")
        return fn[name]()
