"""Action triplets and action-state descriptions generated from captions by an LLM."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import yaml

from .llm import BackendError, LLMBackend, ResponseCache, template_fingerprint
from .tokenizer import truncate_words

log = logging.getLogger(__name__)

K_MAX = 8
PLACEHOLDER_STATE = "the action occurs"
REPAIR_SUFFIX = "\n\nOutput only triplets in <a, b, c> form, one per line."
_DELIMS = set("<>,")


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ActionTriplet:
    subject: str
    action: str
    object: str

    def __post_init__(self):
        for name in ("subject", "action", "object"):
            value = getattr(self, name).strip()
            if not value:
                raise ValidationError(f"triplet {name} is empty")
            if _DELIMS & set(value):
                raise ValidationError(f"triplet {name} {value!r} contains a delimiter")
            object.__setattr__(self, name, value)

    def render(self) -> str:
        return f"<{self.subject}, {self.action}, {self.object}>"

    def as_list(self) -> List[str]:
        return [self.subject, self.action, self.object]


@dataclass
class ActionKnowledge:
    caption_id: str
    caption: str
    triplets: List[ActionTriplet] = field(default_factory=list)
    state_descriptions: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.caption.strip():
            raise ValidationError("caption is empty")
        if len(self.triplets) != len(self.state_descriptions):
            raise ValidationError(
                f"{self.caption_id}: {len(self.triplets)} triplets but {len(self.state_descriptions)} states"
            )

    def to_json(self) -> str:
        record = {
            "caption_id": self.caption_id,
            "caption": self.caption,
            "triplets": [t.as_list() for t in self.triplets],
            "states": list(self.state_descriptions),
        }
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ActionKnowledge":
        r = json.loads(line)
        return cls(r["caption_id"], r["caption"], [ActionTriplet(*t) for t in r["triplets"]], list(r["states"]))


@dataclass
class InstructionTemplate:
    system_text: str
    in_context_examples: List[Tuple[str, str]]
    user_slot: str

    def __post_init__(self):
        if not self.in_context_examples:
            raise ValidationError("template needs at least one in-context example")
        if self.user_slot.count("{}") != 1:
            raise ValidationError("user_slot must contain exactly one '{}' placeholder")
        self.in_context_examples = [tuple(e) for e in self.in_context_examples]

    def messages(self, query: str) -> List[Dict[str, str]]:
        msgs = [{"role": "system", "content": self.system_text}]
        for given, expected in self.in_context_examples:
            msgs.append({"role": "user", "content": self.user_slot.format(given)})
            msgs.append({"role": "assistant", "content": expected})
        msgs.append({"role": "user", "content": self.user_slot.format(query)})
        return msgs

    @classmethod
    def load(cls, path) -> "InstructionTemplate":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return cls(data["system_text"], [tuple(e) for e in data["in_context_examples"]], data["user_slot"])


TRIPLET_TEMPLATE = InstructionTemplate(
    system_text=(
        "You decompose image captions into action triplets. Every triplet names an initiating "
        "entity, the action or relation it takes part in, and the entity receiving it. Attributes "
        "of a single entity may be written with the action 'is'. Answer with one triplet per line "
        "in the form <subject, action, object> and nothing else."
    ),
    in_context_examples=[
        ("A man wearing a blue shirt is jumping in the air", "<man, jumping, air>\n<man, wearing, shirt>"),
        ("A small girl studies with a laptop on the sofa", "<girl, study, laptop>\n<girl, is, small>"),
        ("Two dogs chase a frisbee across the park", "<dogs, chase, frisbee>"),
    ],
    user_slot="Caption: {}",
)

STATE_TEMPLATE = InstructionTemplate(
    system_text=(
        "For the given caption and action triplet, describe in one sentence the visible physical "
        "state that the action causes or implies for the entities involved. Answer with the "
        "sentence only."
    ),
    in_context_examples=[
        (
            "A man wearing a blue shirt is jumping in the air\nTriplet: <man, jumping, air>",
            "lifting both feet off the ground and propelling the body upwards",
        ),
        (
            "A girl studies with a laptop\nTriplet: <girl, laptop, study>",
            "She focuses on the laptop screen, types on the keyboard, and maintains a stable posture",
        ),
    ],
    user_slot="Caption: {}",
)


def state_query(caption: str, triplet: ActionTriplet) -> str:
    return f"{caption}\nTriplet: {triplet.render()}"


_LINE = re.compile(r"^\s*(?:[-*\d.)\s]*)?([<(])(.*)([>)])\s*[.,;]?\s*$")


def parse_triplet_line(line: str) -> Optional[ActionTriplet]:
    """Parse ``<a, b, c>`` or ``(a, b, c)``; returns None on anything else."""
    m = _LINE.match(line)
    if not m or {"<": ">", "(": ")"}[m.group(1)] != m.group(3):
        return None
    fields = m.group(2).split(",")
    if len(fields) != 3:
        return None
    try:
        return ActionTriplet(*(f.strip() for f in fields))
    except ValidationError:
        return None


def parse_triplets(text: str) -> List[ActionTriplet]:
    out: List[ActionTriplet] = []
    for line in text.splitlines():
        t = parse_triplet_line(line)
        if t is not None and t not in out:
            out.append(t)
    return out[:K_MAX]


class KnowledgeGenerator:
    """Wraps a backend with an optional response cache and call accounting."""

    def __init__(self, backend: LLMBackend, cache: Optional[ResponseCache] = None,
                 triplet_template: InstructionTemplate = TRIPLET_TEMPLATE,
                 state_template: InstructionTemplate = STATE_TEMPLATE,
                 max_state_tokens: int = 30):
        self.backend = backend
        self.cache = cache
        self.triplet_template = triplet_template
        self.state_template = state_template
        self.max_state_tokens = max_state_tokens

    def ask(self, template: InstructionTemplate, query: str, suffix: str = "") -> Tuple[str, bool]:
        """Returns (response, served_from_cache)."""
        key = ResponseCache.key(template_fingerprint(template), query + suffix, self.backend.identity)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit, True
        msgs = template.messages(query)
        if suffix:
            msgs[-1]["content"] += suffix
        resp = self.backend.complete(msgs)
        if self.cache is not None:
            self.cache.put(key, resp)
        return resp, False


def _as_generator(backend) -> KnowledgeGenerator:
    return backend if isinstance(backend, KnowledgeGenerator) else KnowledgeGenerator(backend)


def generate_triplets(caption: str, template: Optional[InstructionTemplate],
                      backend: Union[LLMBackend, KnowledgeGenerator], caption_id: Optional[str] = None,
                      _stats: Optional[dict] = None) -> List[ActionTriplet]:
    if not caption or not caption.strip():
        raise ValidationError("caption is empty")
    gen = _as_generator(backend)
    template = template or gen.triplet_template
    stats = _stats if _stats is not None else {}
    try:
        resp, hit = gen.ask(template, caption)
        stats["misses"] = stats.get("misses", 0) + (not hit)
        triplets = parse_triplets(resp)
        if not triplets:
            resp, hit = gen.ask(template, caption, REPAIR_SUFFIX)
            stats["misses"] = stats.get("misses", 0) + (not hit)
            triplets = parse_triplets(resp)
            if not triplets:
                log.warning("no well-formed triplets for caption %s after repair retry", caption_id)
    except BackendError as exc:
        raise BackendError(str(exc), caption_id) from exc
    return triplets


def generate_state_descriptions(triplets: Sequence[ActionTriplet], caption: str,
                                template: Optional[InstructionTemplate],
                                backend: Union[LLMBackend, KnowledgeGenerator],
                                caption_id: Optional[str] = None, _stats: Optional[dict] = None) -> List[str]:
    gen = _as_generator(backend)
    template = template or gen.state_template
    stats = _stats if _stats is not None else {}
    out = []
    for t in triplets:
        try:
            resp, hit = gen.ask(template, state_query(caption, t))
        except BackendError as exc:
            raise BackendError(str(exc), caption_id) from exc
        stats["misses"] = stats.get("misses", 0) + (not hit)
        desc = " ".join(resp.split())
        if not desc:
            log.warning("empty state description for %s %s; using placeholder", caption_id, t.render())
            desc = PLACEHOLDER_STATE
        out.append(truncate_words(desc, gen.max_state_tokens))
    return out


def build_knowledge(caption_id: str, caption: str, gen: KnowledgeGenerator,
                    stats: Optional[dict] = None) -> ActionKnowledge:
    triplets = generate_triplets(caption, None, gen, caption_id, stats)
    states = generate_state_descriptions(triplets, caption, None, gen, caption_id, stats)
    return ActionKnowledge(caption_id, caption, triplets, states)


# --------------------------------------------------------------------------
# batch annotation


@dataclass
class AnnotationSummary:
    captions: int = 0
    triplets: int = 0
    cache_hits: int = 0
    failures: int = 0
    backend_calls: int = 0

    @property
    def failure_fraction(self) -> float:
        return self.failures / self.captions if self.captions else 0.0

    def as_dict(self):
        return {"captions": self.captions, "triplets": self.triplets, "cache_hits": self.cache_hits,
                "failures": self.failures, "backend_calls": self.backend_calls}


def _read_caption_lines(path) -> List[Union[Tuple[str, str], Exception]]:
    rows: List[Union[Tuple[str, str], Exception]] = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            cid, cap = r["caption_id"], r["caption"]
            if not isinstance(cid, str) or not isinstance(cap, str):
                raise TypeError("caption_id and caption must be strings")
            rows.append((cid, cap))
        except (ValueError, KeyError, TypeError) as exc:
            rows.append(ValidationError(f"line {n}: {exc}"))
    return rows


def annotate_corpus(captions_path, out_path, backend: LLMBackend, parallelism: int = 4,
                    cache_dir=None, generator: Optional[KnowledgeGenerator] = None) -> AnnotationSummary:
    """Annotate every caption in a JSON-lines manifest and write the knowledge sidecar.

    Records keep input order so the sidecar is byte-identical across runs.
    Bad lines and per-caption failures are counted and skipped.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    rows = _read_caption_lines(captions_path)
    if generator is None:
        cache = ResponseCache(cache_dir if cache_dir is not None else Path(out_path).parent / "llm-cache")
        generator = KnowledgeGenerator(backend, cache)
    calls_before = generator.backend.calls

    def work(row):
        if isinstance(row, Exception):
            return row, None
        cid, cap = row
        stats: dict = {}
        try:
            return build_knowledge(cid, cap, generator, stats), stats
        except (BackendError, ValidationError) as exc:
            log.error("caption %s failed: %s", cid, exc)
            return exc, None

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        results = list(pool.map(work, rows))

    summary = AnnotationSummary(captions=len(rows))
    lines = []
    for rec, stats in results:
        if isinstance(rec, Exception):
            summary.failures += 1
            continue
        summary.triplets += len(rec.triplets)
        summary.cache_hits += int(stats.get("misses", 0) == 0)
        lines.append(rec.to_json() + "\n")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(out_path)
    summary.backend_calls = generator.backend.calls - calls_before
    return summary


def load_knowledge(path) -> Dict[str, ActionKnowledge]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k = ActionKnowledge.from_json(line)
            out[k.caption_id] = k
    return out
