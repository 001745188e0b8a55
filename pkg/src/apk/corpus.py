"""Synthetic action-discrimination corpus: two shapes and an action glyph.

Shapes sit in distinct cells of a grid aligned with the vision patches, at
random positions. A 2x2 white glyph drawn inside the subject marks who acts,
and where the glyph sits inside the subject encodes the action.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 240),
    "yellow": (240, 215, 30),
}
SHAPES = ("circle", "square", "triangle")
# action -> (row, col) of the glyph inside the subject's cell
ACTIONS: Dict[str, Tuple[int, int]] = {
    "push": (0, 0),
    "pull": (0, 3),
    "hold": (0, 5),
    "chase": (5, 0),
    "face": (5, 3),
    "avoid": (5, 5),
}
CELL = 8
SPLITS = ("train", "val", "test")
DEFAULT_COUNTS = {"train": 256, "val": 64, "test": 64}
SHAPE_PX = 7
MARKER = (255, 255, 255)
BACKGROUND = (20, 20, 20)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Entity:
    shape: str
    color: str


@dataclass(frozen=True)
class SceneSpec:
    subject: Entity
    object: Entity
    action: str
    layout_seed: int = 0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise CorpusError(f"unknown action {self.action!r}")
        if self.subject == self.object:
            raise CorpusError("subject and object must differ in shape or color")
        for e in (self.subject, self.object):
            if e.shape not in SHAPES or e.color not in COLORS:
                raise CorpusError(f"unknown entity {e}")

    @property
    def key(self) -> Tuple:
        return (self.subject, self.object, self.action)

    def triplet(self) -> List[str]:
        return [self.subject.shape, self.action, self.object.shape]


def third_person(verb: str) -> str:
    return verb + "es" if verb.endswith(("sh", "ch", "s", "x", "z")) else verb + "s"


def caption_scene(spec: SceneSpec) -> str:
    s, o = spec.subject, spec.object
    return f"a {s.color} {s.shape} {third_person(spec.action)} a {o.color} {o.shape}"


def _shape_mask(shape: str, n: int = SHAPE_PX) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    if shape == "square":
        return np.ones((n, n), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (n / 2) ** 2 - 0.5
    # upward triangle
    return np.abs(xx - c) <= (yy + 1) / 2


def render_scene(spec: SceneSpec, image_size: int = 32) -> np.ndarray:
    """Rasterize to ``uint8[H, W, 3]``; identical specs give identical pixels."""
    if spec.action not in ACTIONS:
        raise CorpusError(f"unknown action {spec.action!r}")
    if image_size % CELL or image_size < 2 * CELL:
        raise CorpusError(f"image_size must be a multiple of {CELL} and at least {2 * CELL}")
    rng = np.random.default_rng(spec.layout_seed)
    grid = image_size // CELL
    cells = rng.choice(grid * grid, size=2, replace=False)

    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for ent, cell in zip((spec.subject, spec.object), cells):
        y, x = divmod(int(cell), grid)
        y, x = y * CELL, x * CELL
        img[y:y + SHAPE_PX, x:x + SHAPE_PX][_shape_mask(ent.shape)] = COLORS[ent.color]
    gy, gx = ACTIONS[spec.action]
    y, x = divmod(int(cells[0]), grid)
    y, x = y * CELL + gy, x * CELL + gx
    img[y:y + 2, x:x + 2] = MARKER
    return img


def image_tensor(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# PPM raster I/O


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise CorpusError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


# --------------------------------------------------------------------------
# corpus construction


def _entity_pairs() -> List[Tuple[Entity, Entity]]:
    ents = [Entity(s, c) for c in COLORS for s in SHAPES]
    return [(a, b) for a, b in itertools.permutations(ents, 2)]


def _layout_seed(seed: int, spec_key) -> int:
    h = hashlib.sha256(f"{seed}|{spec_key}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def plan_corpus(counts: Dict[str, int] = None, seed: int = 0) -> Dict[str, List[SceneSpec]]:
    """Choose scene specs for each split.

    Every val/test entity pair contributes two actions, so each held-out item
    has a same-entities, different-action distractor in its own split. The
    remaining four actions of those pairs (then fresh pairs) fill train.
    """
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    for split in SPLITS:
        counts.setdefault(split, 0)
        if counts[split] < 0:
            raise CorpusError(f"negative count for {split}")
    for split in ("val", "test"):
        if counts[split] % 2:
            raise CorpusError(f"{split} count must be even so every item has an action distractor")
    pairs = _entity_pairs()
    n_actions = len(ACTIONS)
    grid = len(pairs) * n_actions
    total = sum(counts.values())
    held_pairs = (counts["val"] + counts["test"]) // 2
    train_capacity = 4 * held_pairs + n_actions * (len(pairs) - held_pairs)
    if total > grid or held_pairs > len(pairs) or counts["train"] > train_capacity:
        raise CorpusError(f"requested {counts} exceeds the {grid}-spec grid")

    rng = np.random.default_rng(seed)
    pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    actions = [list(ACTIONS)[i] for i in rng.permutation(n_actions)]
    half = n_actions // 2

    def order(p: int) -> List[str]:
        # held-out actions {p, p+half}; the rest follow
        idx = [p, p + half] + [p + j for j in range(1, n_actions) if j != half]
        return [actions[i % n_actions] for i in idx]

    out: Dict[str, List[SceneSpec]] = {s: [] for s in SPLITS}
    leftovers: List[Tuple[int, str]] = []
    for p in range(held_pairs):
        split = "test" if p < counts["test"] // 2 else "val"
        acts = order(p)
        for a in acts[:2]:
            out[split].append((p, a))
        leftovers.extend((p, a) for a in acts[2:])
    p = held_pairs
    while len(leftovers) < counts["train"]:
        leftovers.extend((p, a) for a in order(p))
        p += 1
    out["train"] = leftovers[: counts["train"]]

    specs: Dict[str, List[SceneSpec]] = {}
    for split in SPLITS:
        specs[split] = []
        for p, a in out[split]:
            s, o = pairs[p]
            specs[split].append(SceneSpec(s, o, a, _layout_seed(seed, (s, o, a))))
    return specs


def build_corpus(out_dir, counts: Dict[str, int] = None, seed: int = 0, image_size: int = 32) -> Dict[str, list]:
    """Render images and write ``{split}.manifest``, ``truth.triplets`` and ``images/``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    plan = plan_corpus(counts, seed)
    truth_lines = []
    manifests = {}
    for split in SPLITS:
        lines, items = [], []
        for i, spec in enumerate(plan[split]):
            cid = f"{split}-{i:04d}"
            rel = f"images/{cid}.ppm"
            write_ppm(out_dir / rel, render_scene(spec, image_size))
            item = {"caption_id": cid, "caption": caption_scene(spec), "image_path": rel, "image_id": cid}
            items.append(item)
            lines.append(json.dumps(item) + "\n")
            truth_lines.append(json.dumps({"caption_id": cid, "triplet": spec.triplet(),
                                           "spec": asdict(spec)}, sort_keys=True) + "\n")
        (out_dir / f"{split}.manifest").write_text("".join(lines), encoding="utf-8")
        manifests[split] = items
    (out_dir / "truth.triplets").write_text("".join(truth_lines), encoding="utf-8")
    return manifests


@dataclass
class Split:
    """A loaded corpus split. ``images`` holds one entry per unique image."""

    name: str
    caption_ids: List[str]
    captions: List[str]
    image_ids: List[str]
    images: np.ndarray  # float32 [G, H, W, 3] in [0, 1]
    caption_image: List[int]  # caption index -> image index

    def __len__(self):
        return len(self.captions)


def load_manifest(corpus_dir, split: str) -> List[dict]:
    path = Path(corpus_dir) / f"{split}.manifest"
    if not path.exists():
        raise CorpusError(f"missing manifest {path}")
    items = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    ids = [it["caption_id"] for it in items]
    if len(set(ids)) != len(ids):
        raise CorpusError(f"{path}: duplicate caption ids")
    return items


def load_split(corpus_dir, split: str, image_size: int = 32) -> Split:
    corpus_dir = Path(corpus_dir)
    items = load_manifest(corpus_dir, split)
    image_ids: List[str] = []
    images = []
    index: Dict[str, int] = {}
    mapping = []
    for it in items:
        iid = it.get("image_id", it["image_path"])
        if iid not in index:
            img = read_ppm(corpus_dir / it["image_path"])
            if img.shape != (image_size, image_size, 3):
                raise CorpusError(f"{it['image_path']}: expected {image_size}x{image_size}, got {img.shape[:2]}")
            index[iid] = len(image_ids)
            image_ids.append(iid)
            images.append(image_tensor(img))
        mapping.append(index[iid])
    arr = np.stack(images) if images else np.zeros((0, image_size, image_size, 3), np.float32)
    return Split(split, [it["caption_id"] for it in items], [it["caption"] for it in items], image_ids, arr, mapping)


def load_truth(corpus_dir) -> Dict[str, List[str]]:
    out = {}
    for line in (Path(corpus_dir) / "truth.triplets").read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        out[r["caption_id"]] = r["triplet"]
    return out


def all_specs() -> Sequence[SceneSpec]:
    return [SceneSpec(s, o, a) for s, o in _entity_pairs() for a in ACTIONS]
