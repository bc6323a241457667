"""Synthetic spatial-relation scenes and the oracle object detector.

Scenes are rendered images of solid colored shapes whose relation triplets
are derived from box geometry by a fixed rule set (containment beats overlap
beats direction).

The category vocabulary comes in visually confusable twins: each twin pair
shares a shape and a near-identical color, and the scene motifs tie the twin
identity to sub-pixel placement decisions - one twin hovers with a tiny gap
(directional predicate) where its sibling touches (overlap predicate), one
twin sits fully inside a frame where its sibling pokes out by a fraction of
a pixel. Appearance and masks cannot separate such pairs reliably, but the
symbolic category pair determines the predicate, the way subject/object
categories determine "ride" versus "sit on" in real scenes. Uncorrelated
filler objects add easy, purely geometric relations on top.

The oracle detector stands in for a learned detector: it replays ground
truth corrupted by configurable box jitter, label flips, drops and false
positives.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BBox, ScoredBox, intersection_area, iou, nms

# Detections below this confidence never enter the pair pipeline.
SCORE_THRESHOLD = 0.1

PREDICATES = ("above", "below", "left-of", "right-of", "inside", "overlapping")


class GenerationError(RuntimeError):
    """Raised when a scene cannot be placed within the retry budget."""


@dataclass(frozen=True)
class CategoryVocab:
    """Ordered object-category and predicate names; indices are stable."""

    objects: tuple[str, ...]
    predicates: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.objects)) != len(self.objects):
            raise ValueError("object category names must be unique")
        if len(set(self.predicates)) != len(self.predicates):
            raise ValueError("predicate names must be unique")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    def save(self, path: str | Path) -> None:
        doc = {"object_categories": list(self.objects),
               "predicates": list(self.predicates)}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CategoryVocab":
        doc = json.loads(Path(path).read_text())
        return cls(tuple(doc["object_categories"]), tuple(doc["predicates"]))


@dataclass(frozen=True)
class ObjectInstance:
    category: int
    box: BBox


@dataclass
class SceneAnnotation:
    """An image plus labeled objects and ground-truth relation triplets."""

    width: int
    height: int
    pixels: np.ndarray                       # H x W x 3 uint8
    objects: list[ObjectInstance]
    relations: list[tuple[int, int, int]]    # (subject, predicate, object) indices

    def validate(self, num_predicates: int) -> None:
        n = len(self.objects)
        seen = set()
        for s, p, o in self.relations:
            if not (0 <= s < n and 0 <= o < n):
                raise ValueError(f"relation ({s},{p},{o}) references a missing object")
            if s == o:
                raise ValueError("relation subject and object must differ")
            if not 0 <= p < num_predicates:
                raise ValueError(f"predicate index {p} out of range")
            if (s, p, o) in seen:
                raise ValueError(f"duplicate relation ({s},{p},{o})")
            seen.add((s, p, o))
        for inst in self.objects:
            b = inst.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError("object box exceeds image bounds")


# ---------------------------------------------------------------------------
# category table: shape, color and size prior per default category
#
# Categories come in confusable twins (same shape, near-identical color): the
# scene motifs below key sub-pixel placement on the twin identity, so the
# symbolic category carries information that appearance does not.

@dataclass(frozen=True)
class _CategoryStyle:
    shape: str                    # rectangle | ellipse | triangle
    color: tuple[int, int, int]
    size: tuple[float, float]     # side-length range at image size 128


_STYLES: dict[str, _CategoryStyle] = {
    "red-disk": _CategoryStyle("ellipse", (214, 39, 40), (6, 10)),
    "crimson-disk": _CategoryStyle("ellipse", (208, 43, 46), (6, 10)),
    "green-tile": _CategoryStyle("rectangle", (44, 160, 44), (6, 10)),
    "jade-tile": _CategoryStyle("rectangle", (48, 156, 50), (6, 10)),
    "teal-wedge": _CategoryStyle("triangle", (23, 190, 190), (7, 11)),
    "cyan-wedge": _CategoryStyle("triangle", (29, 184, 196), (7, 11)),
    "slate-frame": _CategoryStyle("rectangle", (104, 112, 126), (18, 26)),
    "pewter-frame": _CategoryStyle("rectangle", (110, 108, 120), (18, 26)),
}

_FRAMES = ("slate-frame", "pewter-frame")
_INSIDERS = ("red-disk", "green-tile")       # placed strictly inside a frame
_STRADDLERS = ("crimson-disk", "jade-tile")  # poke out over a frame's edge

_BACKGROUND = (228, 228, 228)


def default_vocab() -> CategoryVocab:
    return CategoryVocab(tuple(_STYLES.keys()), PREDICATES)


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 128
    min_objects: int = 2
    max_objects: int = 5
    # Weight of each object count in [min, max]; lighter scenes keep relation
    # counts desk-scale. Renormalized, so any positive weights are fine.
    object_count_weights: tuple[float, ...] = (0.7, 0.2, 0.07, 0.03)
    # Per-scene motif probabilities (at most one motif per scene).
    contain_prob: float = 0.16      # insider twin fully inside a frame
    straddle_prob: float = 0.12     # straddler twin pokes over a frame edge
    vstack_prob: float = 0.14       # disk twins stacked: gap or touch
    hstack_prob: float = 0.14       # tile twins side by side: gap or touch
    wstack_prob: float = 0.10       # wedge twins stacked: gap or touch
    # Gap / overlap / protrusion magnitude for the ambiguous placements, in
    # pixels at image size 128. Kept below the mask-raster quantum of a
    # typical pair crop, so the rasterized masks of a gap and of a touch are
    # usually identical; only the category pair disambiguates those scenes.
    ambiguity_range: tuple[float, float] = (0.05, 0.3)
    max_retries: int = 50

    def __post_init__(self):
        if self.min_objects < 2 or self.max_objects < self.min_objects:
            raise ValueError("object count range must satisfy 2 <= min <= max")
        span = self.max_objects - self.min_objects + 1
        if len(self.object_count_weights) != span:
            raise ValueError(
                f"need {span} object count weights, got "
                f"{len(self.object_count_weights)}")
        if any(w < 0 for w in self.object_count_weights) \
                or sum(self.object_count_weights) <= 0:
            raise ValueError("object count weights must be non-negative, sum > 0")
        probs = (self.contain_prob, self.straddle_prob, self.vstack_prob,
                 self.hstack_prob, self.wstack_prob)
        if any(not 0.0 <= p <= 1.0 for p in probs) or sum(probs) > 1.0:
            raise ValueError("motif probabilities must be in [0, 1], sum <= 1")
        lo, hi = self.ambiguity_range
        if not 0.0 < lo <= hi:
            raise ValueError("ambiguity range must satisfy 0 < lo <= hi")


# ---------------------------------------------------------------------------
# relation rules

def derive_relations(objects: list[ObjectInstance],
                     vocab: CategoryVocab) -> list[tuple[int, int, int]]:
    """Relation triplets implied by box geometry under the fixed rule set.

    Priority per ordered pair: containment, then overlap, then direction.
    Directional predicates require alignment overlap on the perpendicular
    axis and a center separation of at least a quarter of the pair's mean
    extent, so each ordered pair yields at most one triplet.
    """
    pidx = {name: i for i, name in enumerate(vocab.predicates)}
    out: list[tuple[int, int, int]] = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i == j:
                continue
            pred = _pair_predicate(a.box, b.box)
            if pred is not None:
                out.append((i, pidx[pred], j))
    return out


def _pair_predicate(a: BBox, b: BBox) -> str | None:
    if b.contains(a):
        return "inside"
    if intersection_area(a, b) > 0.0:
        return "overlapping"
    ax, ay = a.center
    bx, by = b.center
    x_overlap = min(a.x2, b.x2) - max(a.x1, b.x1) > 0
    y_overlap = min(a.y2, b.y2) - max(a.y1, b.y1) > 0
    mean_h = 0.5 * (a.height + b.height)
    mean_w = 0.5 * (a.width + b.width)
    if x_overlap and ay < by - 0.25 * mean_h:
        return "above"
    if x_overlap and ay > by + 0.25 * mean_h:
        return "below"
    if y_overlap and ax < bx - 0.25 * mean_w:
        return "left-of"
    if y_overlap and ax > bx + 0.25 * mean_w:
        return "right-of"
    return None


# ---------------------------------------------------------------------------
# rendering

def _render(objects: list[ObjectInstance], size: int,
            vocab: CategoryVocab) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = _BACKGROUND
    ys, xs = np.mgrid[0:size, 0:size]
    cx_grid = xs + 0.5
    cy_grid = ys + 0.5
    # Larger shapes first so contained/overlapped smaller ones stay visible.
    order = sorted(range(len(objects)), key=lambda k: (-objects[k].box.area, k))
    for k in order:
        inst = objects[k]
        style = _STYLES[vocab.objects[inst.category]]
        b = inst.box
        if style.shape == "rectangle":
            mask = (cx_grid >= b.x1) & (cx_grid < b.x2) & \
                   (cy_grid >= b.y1) & (cy_grid < b.y2)
        elif style.shape == "ellipse":
            ex, ey = b.center
            rx, ry = b.width / 2.0, b.height / 2.0
            mask = ((cx_grid - ex) / rx) ** 2 + ((cy_grid - ey) / ry) ** 2 <= 1.0
        else:  # triangle: apex top-center, base along the bottom edge
            apex = (0.5 * (b.x1 + b.x2), b.y1)
            t = np.clip((cy_grid - b.y1) / b.height, 0.0, 1.0)
            half = 0.5 * b.width * t
            mask = (cy_grid >= b.y1) & (cy_grid < b.y2) & \
                   (np.abs(cx_grid - apex[0]) <= half)
        img[mask] = style.color
    return img


# ---------------------------------------------------------------------------
# generation

def generate_synthetic_scene(config: GeneratorConfig, seed: int,
                             vocab: CategoryVocab | None = None) -> SceneAnnotation:
    """Render one seeded scene; identical (config, seed) gives identical output."""
    vocab = vocab or default_vocab()
    rng = np.random.default_rng(seed)
    for _ in range(config.max_retries):
        objects = _try_place(config, rng, vocab)
        if objects is not None:
            scene = SceneAnnotation(
                width=config.image_size, height=config.image_size,
                pixels=_render(objects, config.image_size, vocab),
                objects=objects,
                relations=derive_relations(objects, vocab))
            scene.validate(vocab.num_predicates)
            return scene
    raise GenerationError(
        f"could not place {config.min_objects}-{config.max_objects} objects in a "
        f"{config.image_size}px scene after {config.max_retries} attempts")


def _try_place(config: GeneratorConfig, rng: np.random.Generator,
               vocab: CategoryVocab) -> list[ObjectInstance] | None:
    size = config.image_size
    scale = size / 128.0
    cat_index = {name: i for i, name in enumerate(vocab.objects)}
    weights = np.asarray(config.object_count_weights, dtype=np.float64)
    m = config.min_objects + int(rng.choice(len(weights), p=weights / weights.sum()))

    def sample_dims(name: str) -> tuple[float, float]:
        lo, hi = _STYLES[name].size
        w = rng.uniform(lo * scale, hi * scale)
        return w, w * rng.uniform(0.8, 1.25)

    def place_free(name: str) -> ObjectInstance | None:
        w, h = sample_dims(name)
        if w >= size or h >= size:
            return None
        cx = rng.uniform(w / 2, size - w / 2)
        cy = rng.uniform(h / 2, size - h / 2)
        return ObjectInstance(cat_index[name],
                              BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))

    def ambiguity() -> float:
        lo, hi = config.ambiguity_range
        return rng.uniform(lo * scale, hi * scale)

    def stack_pair(top_name: str, bottom_name: str, touch: bool,
                   horizontal: bool) -> list[ObjectInstance] | None:
        # Two near-twins separated (or overlapped) by a sub-pixel-scale
        # amount along one axis, well aligned on the other.
        w1, h1 = sample_dims(top_name)
        w2, h2 = sample_dims(bottom_name)
        delta = -ambiguity() if touch else ambiguity()
        if horizontal:
            total_w, total_h = w1 + delta + w2, max(h1, h2)
        else:
            total_w, total_h = max(w1, w2), h1 + delta + h2
        if total_w >= size - 2 or total_h >= size - 2:
            return None
        x0 = rng.uniform(1, size - 1 - total_w)
        y0 = rng.uniform(1, size - 1 - total_h)
        if horizontal:
            off = rng.uniform(-0.25, 0.25) * (h1 + h2) / 2
            a = BBox(x0, y0, x0 + w1, y0 + h1)
            b = BBox(x0 + w1 + delta, y0 + off, x0 + w1 + delta + w2, y0 + off + h2)
        else:
            off = rng.uniform(-0.25, 0.25) * (w1 + w2) / 2
            a = BBox(x0, y0, x0 + w1, y0 + h1)
            b = BBox(x0 + off, y0 + h1 + delta, x0 + off + w2, y0 + h1 + delta + h2)
        if b.x1 < 0 or b.y1 < 0 or b.x2 > size or b.y2 > size:
            return None
        if touch == (intersection_area(a, b) == 0.0):
            return None
        return [ObjectInstance(cat_index[top_name], a),
                ObjectInstance(cat_index[bottom_name], b)]

    def frame_pair(small_name: str, straddle: bool) -> list[ObjectInstance] | None:
        # A small object hugging a frame edge from inside; the straddler twin
        # crosses the edge by a sub-pixel-scale protrusion instead.
        frame = place_free(_FRAMES[int(rng.integers(len(_FRAMES)))])
        if frame is None:
            return None
        fb = frame.box
        w, h = sample_dims(small_name)
        if w >= fb.width - 2 or h >= fb.height - 2:
            return None
        d = ambiguity()
        edge = int(rng.integers(4))  # 0 left, 1 right, 2 top, 3 bottom
        cx = rng.uniform(fb.x1 + w / 2 + 1, fb.x2 - w / 2 - 1)
        cy = rng.uniform(fb.y1 + h / 2 + 1, fb.y2 - h / 2 - 1)
        if edge == 0:
            x1 = fb.x1 - d if straddle else fb.x1 + d
            box = BBox(x1, cy - h / 2, x1 + w, cy + h / 2)
        elif edge == 1:
            x2 = fb.x2 + d if straddle else fb.x2 - d
            box = BBox(x2 - w, cy - h / 2, x2, cy + h / 2)
        elif edge == 2:
            y1 = fb.y1 - d if straddle else fb.y1 + d
            box = BBox(cx - w / 2, y1, cx + w / 2, y1 + h)
        else:
            y2 = fb.y2 + d if straddle else fb.y2 - d
            box = BBox(cx - w / 2, y2 - h, cx + w / 2, y2)
        if box.x1 < 0 or box.y1 < 0 or box.x2 > size or box.y2 > size:
            return None
        if straddle == fb.contains(box) or intersection_area(box, fb) == 0.0:
            return None
        return [frame, ObjectInstance(cat_index[small_name], box)]

    objects: list[ObjectInstance] = []
    remaining = m
    if remaining >= 2:
        r = rng.random()
        thresholds = np.cumsum([config.contain_prob, config.straddle_prob,
                                config.vstack_prob, config.hstack_prob,
                                config.wstack_prob])
        pair: list[ObjectInstance] | None = None
        if r < thresholds[0]:
            pair = frame_pair(_INSIDERS[int(rng.integers(2))], straddle=False)
        elif r < thresholds[1]:
            pair = frame_pair(_STRADDLERS[int(rng.integers(2))], straddle=True)
        elif r < thresholds[2]:
            touch = rng.random() < 0.5
            names = ("crimson-disk", "red-disk") if touch else \
                ("red-disk", "crimson-disk")
            pair = stack_pair(*names, touch=touch, horizontal=False)
        elif r < thresholds[3]:
            touch = rng.random() < 0.5
            names = ("jade-tile", "green-tile") if touch else \
                ("green-tile", "jade-tile")
            pair = stack_pair(*names, touch=touch, horizontal=True)
        elif r < thresholds[4]:
            touch = rng.random() < 0.5
            names = ("cyan-wedge", "teal-wedge") if touch else \
                ("teal-wedge", "cyan-wedge")
            pair = stack_pair(*names, touch=touch, horizontal=False)
        else:
            pair = []
        if pair is None:
            return None
        objects.extend(pair)
        remaining -= len(pair)

    for _ in range(remaining):
        name = vocab.objects[int(rng.integers(vocab.num_objects))]
        inst = place_free(name)
        if inst is None:
            return None
        objects.append(inst)
    return objects


# ---------------------------------------------------------------------------
# persistence

def save_scene_file(scene: SceneAnnotation, path: str | Path,
                    vocab: CategoryVocab) -> None:
    """Write annotation JSON at `path` and the raster as a PNG beside it."""
    path = Path(path)
    image_name = path.stem + ".png"
    doc = {
        "width": scene.width,
        "height": scene.height,
        "image": image_name,
        "objects": [{"category": vocab.objects[o.category],
                     "bbox": o.box.as_list()} for o in scene.objects],
        "relations": [{"sub": s, "pred": vocab.predicates[p], "obj": o}
                      for s, p, o in scene.relations],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    Image.fromarray(scene.pixels).save(path.parent / image_name)


def load_scene_file(path: str | Path, vocab: CategoryVocab) -> SceneAnnotation:
    path = Path(path)
    doc = json.loads(path.read_text())
    cat_index = {name: i for i, name in enumerate(vocab.objects)}
    pred_index = {name: i for i, name in enumerate(vocab.predicates)}
    try:
        objects = [ObjectInstance(cat_index[o["category"]], BBox(*o["bbox"]))
                   for o in doc["objects"]]
        relations = [(r["sub"], pred_index[r["pred"]], r["obj"])
                     for r in doc["relations"]]
    except KeyError as exc:
        raise ValueError(f"{path}: unknown category or predicate {exc}") from exc
    pixels = np.asarray(Image.open(path.parent / doc["image"]).convert("RGB"))
    scene = SceneAnnotation(doc["width"], doc["height"], pixels, objects, relations)
    scene.validate(vocab.num_predicates)
    return scene


def write_dataset(directory: str | Path, scenes: list[SceneAnnotation],
                  vocab: CategoryVocab) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        save_scene_file(scene, directory / f"scene_{i:05d}.json", vocab)


def read_dataset(directory: str | Path,
                 vocab: CategoryVocab) -> list[SceneAnnotation]:
    directory = Path(directory)
    return [load_scene_file(p, vocab)
            for p in sorted(directory.glob("scene_*.json"))]


# ---------------------------------------------------------------------------
# oracle detector

@dataclass(frozen=True)
class DetectorNoiseConfig:
    """Noise model replayed over ground truth in place of a learned detector."""

    jitter_sigma: float = 0.0          # per-coordinate noise, fraction of box side
    flip_prob: float = 0.0             # chance a label becomes a uniform other class
    drop_prob: float = 0.0             # chance an object is missed entirely
    false_positive_rate: float = 0.0   # expected spurious detections per image
    score_sigma: float = 0.0           # score = clamp(1 - |N(0, s)|, 0.05, 1)
    seed: int = 0
    nms_iou: float | None = None       # optional per-class NMS on the output

    def __post_init__(self):
        for p in (self.flip_prob, self.drop_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.jitter_sigma < 0 or self.score_sigma < 0 or self.false_positive_rate < 0:
            raise ValueError("sigmas and rates must be non-negative")

    def with_seed(self, seed: int) -> "DetectorNoiseConfig":
        return dataclasses.replace(self, seed=seed)


def oracle_detect(scene: SceneAnnotation, noise: DetectorNoiseConfig,
                  num_categories: int) -> list[ScoredBox]:
    """Ground truth corrupted per the noise config; deterministic per seed.

    Zero noise reproduces the annotation exactly with unit scores. Output is
    filtered to scores >= 0.1, matching the pair pipeline's confidence floor.
    """
    rng = np.random.default_rng(noise.seed)
    w, h = float(scene.width), float(scene.height)
    detections: list[ScoredBox] = []
    for inst in scene.objects:
        if rng.random() < noise.drop_prob:
            continue
        b = inst.box
        dx = rng.normal(0.0, 1.0, size=2) * noise.jitter_sigma * b.width
        dy = rng.normal(0.0, 1.0, size=2) * noise.jitter_sigma * b.height
        x1 = min(max(b.x1 + dx[0], 0.0), w)
        x2 = min(max(b.x2 + dx[1], 0.0), w)
        y1 = min(max(b.y1 + dy[0], 0.0), h)
        y2 = min(max(b.y2 + dy[1], 0.0), h)
        if x2 <= x1:
            x1, x2 = max(0.0, x1 - 0.5), min(w, x1 + 0.5 + 1e-3)
        if y2 <= y1:
            y1, y2 = max(0.0, y1 - 0.5), min(h, y1 + 0.5 + 1e-3)
        category = inst.category
        if rng.random() < noise.flip_prob and num_categories > 1:
            shift = 1 + int(rng.integers(num_categories - 1))
            category = (category + shift) % num_categories
        score = float(np.clip(1.0 - abs(rng.normal(0.0, noise.score_sigma)),
                              0.05, 1.0)) if noise.score_sigma > 0 else 1.0
        detections.append(ScoredBox(BBox(x1, y1, x2, y2), category, score))

    n_fp = int(rng.poisson(noise.false_positive_rate)) \
        if noise.false_positive_rate > 0 else 0
    for _ in range(n_fp):
        fp = _sample_false_positive(rng, scene, num_categories)
        if fp is not None:
            detections.append(fp)

    if noise.nms_iou is not None:
        kept: list[ScoredBox] = []
        for cat in sorted({d.category for d in detections}):
            kept.extend(nms([d for d in detections if d.category == cat],
                            noise.nms_iou))
        detections = kept
    return [d for d in detections if d.score >= SCORE_THRESHOLD]


def _sample_false_positive(rng: np.random.Generator, scene: SceneAnnotation,
                           num_categories: int) -> ScoredBox | None:
    # Spurious boxes keep IoU <= 0.5 against every ground truth so detector
    # evaluation penalties are unambiguous.
    w, h = float(scene.width), float(scene.height)
    for _ in range(20):
        bw = rng.uniform(0.08, 0.4) * w
        bh = rng.uniform(0.08, 0.4) * h
        x1 = rng.uniform(0.0, w - bw)
        y1 = rng.uniform(0.0, h - bh)
        box = BBox(x1, y1, x1 + bw, y1 + bh)
        score = float(rng.uniform(0.05, 0.35))
        if all(iou(box, inst.box) <= 0.5 for inst in scene.objects):
            return ScoredBox(box, int(rng.integers(num_categories)), score)
    return None


# ---------------------------------------------------------------------------
# pairing

def enumerate_pairs(detections: list[ScoredBox]) -> list[tuple[ScoredBox, ScoredBox]]:
    """All m(m-1) ordered pairs with distinct indices, lexicographic by index."""
    return [(detections[i], detections[j])
            for i in range(len(detections))
            for j in range(len(detections)) if i != j]


def category_difference_vector(subject_cat: int, object_cat: int,
                               num_categories: int) -> np.ndarray:
    """one_hot(subject) - one_hot(object); the semantics-network input."""
    if not (0 <= subject_cat < num_categories and 0 <= object_cat < num_categories):
        raise ValueError("category index out of range")
    v = np.zeros(num_categories, dtype=np.float64)
    v[subject_cat] += 1.0
    v[object_cat] -= 1.0
    return v
