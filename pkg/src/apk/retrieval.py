"""Top-k pre-selection, knowledge-enriched re-ranking and recall metrics."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from .corpus import Split
from .knowledge import ActionKnowledge, ValidationError
from .model import ActionPromptModel
from .tokenizer import truncate_words

log = logging.getLogger(__name__)

ENRICHMENT_MODES = ("none", "states", "triplets+states")
KS = (1, 5, 10)


@dataclass
class RerankConfig:
    k: int = 20
    enrichment: str = "triplets+states"
    shared_image_feature: bool = False
    chunk: int = 512

    def validate(self, gallery: Optional[int] = None):
        if self.enrichment not in ENRICHMENT_MODES:
            raise ValidationError(f"rerank.enrichment must be one of {ENRICHMENT_MODES}")
        if self.k < 1:
            raise ValidationError("rerank.k must be >= 1")
        if gallery is not None and self.k > gallery:
            raise ValidationError(f"rerank.k={self.k} exceeds gallery size {gallery}")
        if self.chunk < 1:
            raise ValidationError("rerank.chunk must be >= 1")


def preselect(query_feat: torch.Tensor, gallery_feats: torch.Tensor, k: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Indices and scores of the ``k`` most similar gallery rows, best first;
    equal scores keep the lower index first."""
    g = gallery_feats.shape[0]
    if not 1 <= k <= g:
        raise ValidationError(f"k={k} must lie in [1, {g}]")
    scores = gallery_feats @ query_feat
    order = full_order(scores)[:k]
    return order, scores[order]


def full_order(scores: torch.Tensor) -> torch.Tensor:
    return torch.sort(scores, descending=True, stable=True).indices


def enrich_text(caption: str, knowledge: Optional[ActionKnowledge], mode: str = "triplets+states",
                budget: Optional[int] = None) -> str:
    """Caption followed by "; "-separated knowledge, cut to ``budget`` word pieces."""
    if mode not in ENRICHMENT_MODES:
        raise ValidationError(f"unknown enrichment mode {mode!r}")
    if mode == "none" or knowledge is None or not knowledge.triplets:
        return caption
    parts = [caption]
    for t, desc in zip(knowledge.triplets, knowledge.state_descriptions):
        if mode == "triplets+states":
            parts.append(t.render())
        parts.append(desc)
    text = "; ".join(parts)
    return text if budget is None else truncate_words(text, budget)


# --------------------------------------------------------------------------
# metrics


def first_hit_ranks(orderings: Sequence[Sequence[int]], correct: Sequence[set]) -> List[int]:
    """0-based position of the first correct item in each ranked list."""
    ranks = []
    for order, ok in zip(orderings, correct):
        ranks.append(next((i for i, c in enumerate(order) if int(c) in ok), len(order)))
    return ranks


def recall_at(ranks: Sequence[int], ks=KS) -> Dict[int, float]:
    n = len(ranks)
    if n == 0:
        raise ValidationError("no queries to score")
    return {k: sum(r < k for r in ranks) / n for k in ks}


def ranks_from_scores(scores: torch.Tensor, correct: Sequence[set]) -> List[int]:
    """Rank of the best-ranked correct column per row, under the stable descending order."""
    return first_hit_ranks([full_order(row).tolist() for row in scores], correct)


@dataclass
class RetrievalReport:
    direction: str  # image-to-text | text-to-image
    r_at: Dict[int, float]
    rsum: float
    per_query_ranks: List[int]

    @classmethod
    def from_ranks(cls, direction: str, ranks: Sequence[int]) -> "RetrievalReport":
        r = recall_at(ranks)
        return cls(direction, r, 100.0 * sum(r.values()), list(ranks))

    def to_json(self) -> dict:
        return {"direction": self.direction, "r_at": {str(k): v for k, v in self.r_at.items()},
                "rsum": self.rsum, "per_query_ranks": self.per_query_ranks}


def combined_rsum(*reports: RetrievalReport) -> float:
    return sum(r.rsum for r in reports)


# --------------------------------------------------------------------------
# feature index and re-ranking


class RetrievalIndex:
    """Frozen-backbone features of one split, ready for pre-selection and re-ranking."""

    def __init__(self, model: ActionPromptModel, split: Split, knowledge: Mapping[str, ActionKnowledge],
                 cfg: RerankConfig):
        if len(split) == 0:
            raise ValidationError("empty split")
        cfg.validate()
        self.model, self.split, self.cfg = model, split, cfg
        self.correct_images = list(split.caption_image)
        self.image_captions: List[set] = [set() for _ in split.image_ids]
        for c, g in enumerate(split.caption_image):
            self.image_captions[g].add(c)
        records = []
        self.missing = []
        for cid in split.caption_ids:
            rec = knowledge.get(cid)
            if rec is None:
                log.warning("no knowledge for caption %s; scored without enrichment", cid)
                self.missing.append(cid)
            records.append(rec)
        budget = model.tokenizer.budget
        with torch.no_grad():
            images = torch.from_numpy(split.images)
            self.e0 = model.patch_embed(images)
            self.image_base = model.encode_image_plain(images)
            self.text_base = model.encode_texts(split.captions)
            enriched = [enrich_text(c, r, cfg.enrichment, budget) for c, r in zip(split.captions, records)]
            self.text_refined = model.encode_texts(enriched)
            self.knowledge = model.knowledge_inputs(
                [r if r is not None else ActionKnowledge(cid, cap, [], [])
                 for r, cid, cap in zip(records, split.caption_ids, split.captions)])

    @property
    def base_scores(self) -> torch.Tensor:
        """[G, N] plain-path cosine similarities."""
        return self.image_base @ self.text_base.T

    def refined_scores(self, images: torch.Tensor, captions: torch.Tensor, lam=None) -> torch.Tensor:
        """Similarity of image ``images[i]`` conditioned on caption ``captions[i]``'s knowledge."""
        out = []
        step = self.cfg.chunk
        with torch.no_grad():
            for s in range(0, len(images), step):
                gi, ci = images[s:s + step], captions[s:s + step]
                z = self.model.encode_image_prompted(self.e0[gi], self.knowledge.index(ci), lam)
                out.append((z * self.text_refined[ci]).sum(-1))
        return torch.cat(out) if out else torch.zeros(0)

    def _rerank(self, base_rows: torch.Tensor, pairs_fn, k: int, lam=None) -> List[List[int]]:
        orders = [full_order(row) for row in base_rows]
        cand = torch.stack([o[:k] for o in orders])  # [Q, k]
        imgs, caps = pairs_fn(cand)
        refined = self.refined_scores(imgs.reshape(-1), caps.reshape(-1), lam).reshape(cand.shape)
        out = []
        for q, order in enumerate(orders):
            local = full_order(refined[q])
            out.append(cand[q][local].tolist() + order[k:].tolist())
        return out

    def rank_i2t(self, k: Optional[int] = None, lam=None) -> List[List[int]]:
        k = self.cfg.k if k is None else k
        if self.cfg.shared_image_feature:
            return self._rerank_shared(self.base_scores, k, lam)
        n_img = len(self.split.image_ids)

        def pairs(cand):
            return torch.arange(n_img)[:, None].expand_as(cand), cand

        return self._rerank(self.base_scores, pairs, k, lam)

    def _rerank_shared(self, base: torch.Tensor, k: int, lam=None) -> List[List[int]]:
        """One prompted feature per query image, conditioned on its top-1 candidate."""
        orders = [full_order(row) for row in base]
        top1 = torch.stack([o[0] for o in orders])
        out = []
        with torch.no_grad():
            z = self.model.encode_image_prompted(self.e0, self.knowledge.index(top1), lam)
        for g, order in enumerate(orders):
            cand = order[:k]
            refined = self.text_refined[cand] @ z[g]
            out.append(cand[full_order(refined)].tolist() + order[k:].tolist())
        return out

    def rank_t2i(self, k: Optional[int] = None, lam=None) -> List[List[int]]:
        k = self.cfg.k if k is None else k
        n_cap = len(self.split.captions)

        def pairs(cand):
            return cand, torch.arange(n_cap)[:, None].expand_as(cand)

        return self._rerank(self.base_scores.T, pairs, k, lam)

    def base_orders(self) -> Tuple[List[List[int]], List[List[int]]]:
        s = self.base_scores
        return [full_order(r).tolist() for r in s], [full_order(r).tolist() for r in s.T]


def rerank(query: int, direction: str, index: RetrievalIndex, k: Optional[int] = None) -> List[int]:
    """Final ranking for a single query (image index for i2t, caption index for t2i)."""
    orders = index.rank_i2t(k) if direction == "image-to-text" else index.rank_t2i(k)
    return orders[query]


@dataclass
class EvalResult:
    i2t: RetrievalReport
    t2i: RetrievalReport
    base_i2t: RetrievalReport
    base_t2i: RetrievalReport
    config: dict = field(default_factory=dict)

    @property
    def rsum(self) -> float:
        return combined_rsum(self.i2t, self.t2i)

    @property
    def base_rsum(self) -> float:
        return combined_rsum(self.base_i2t, self.base_t2i)

    def run_id(self) -> str:
        payload = json.dumps({"config": self.config, "i2t": self.i2t.per_query_ranks,
                              "t2i": self.t2i.per_query_ranks}, sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    def to_json(self) -> dict:
        return {"run_id": self.run_id(), "rsum": self.rsum, "base_rsum": self.base_rsum,
                "image_to_text": self.i2t.to_json(), "text_to_image": self.t2i.to_json(),
                "base_image_to_text": self.base_i2t.to_json(), "base_text_to_image": self.base_t2i.to_json(),
                "config": self.config}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def summary(self) -> str:
        def fmt(r):
            return " ".join(f"R@{k}={100 * v:.1f}" for k, v in r.r_at.items())
        return (f"i2t {fmt(self.i2t)} | t2i {fmt(self.t2i)} | rsum {self.rsum:.1f} "
                f"(base {self.base_rsum:.1f})")


def evaluate(model: ActionPromptModel, split: Split, knowledge: Mapping[str, ActionKnowledge],
             cfg: Optional[RerankConfig] = None, lam=None, index: Optional[RetrievalIndex] = None) -> EvalResult:
    cfg = cfg or RerankConfig()
    if len(split) == 0:
        raise ValidationError("empty test set")
    k = min(cfg.k, len(split.image_ids), len(split.captions))
    was_training = model.training
    model.eval()
    try:
        index = index or RetrievalIndex(model, split, knowledge, cfg)
        base_i2t, base_t2i = index.base_orders()
        i2t = index.rank_i2t(k, lam)
        t2i = index.rank_t2i(k, lam)
    finally:
        model.train(was_training)
    img_ok, cap_ok = index.image_captions, [{g} for g in index.correct_images]
    echo = {**asdict(cfg), "k": k, "split": split.name, "lam": lam if lam is not None else model.aim_cfg.lam,
            "queries": [len(split.image_ids), len(split.captions)]}
    return EvalResult(
        RetrievalReport.from_ranks("image-to-text", first_hit_ranks(i2t, img_ok)),
        RetrievalReport.from_ranks("text-to-image", first_hit_ranks(t2i, cap_ok)),
        RetrievalReport.from_ranks("image-to-text", first_hit_ranks(base_i2t, img_ok)),
        RetrievalReport.from_ranks("text-to-image", first_hit_ranks(base_t2i, cap_ok)),
        echo,
    )


def retrieve_text(model: ActionPromptModel, split: Split, query: str, knowledge: Optional[ActionKnowledge],
                  cfg: Optional[RerankConfig] = None, topk: int = 5, lam=None) -> List[Tuple[str, float]]:
    """Rank the split's images for a free-text query.

    The top ``cfg.k`` images by plain similarity are re-scored with the query's
    knowledge; returned scores are re-ranking scores for those and plain
    similarities for the rest.
    """
    cfg = cfg or RerankConfig()
    n = len(split.image_ids)
    if n == 0:
        raise ValidationError("empty gallery")
    if topk < 1:
        raise ValidationError("topk must be >= 1")
    k = min(cfg.k, n)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            images = torch.from_numpy(split.images)
            gallery = model.encode_image_plain(images)
            q = model.encode_texts([query])[0]
            base = gallery @ q
            cand, _ = preselect(q, gallery, k)
            rec = knowledge or ActionKnowledge("query", query, [], [])
            text = model.encode_texts([enrich_text(query, rec, cfg.enrichment, model.tokenizer.budget)])[0]
            inputs = model.knowledge_inputs([rec]).index(torch.zeros(k, dtype=torch.long))
            z = model.encode_image_prompted(model.patch_embed(images[cand]), inputs, lam)
            refined = z @ text
    finally:
        model.train(was_training)
    local = full_order(refined)
    order = cand[local].tolist() + [i for i in full_order(base).tolist() if i not in set(cand.tolist())]
    scores = {int(c): float(s) for c, s in zip(cand[local], refined[local])}
    return [(split.image_ids[i], scores.get(i, float(base[i]))) for i in order[:topk]]
