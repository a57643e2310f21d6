"""Synthetic shapes-and-sentences data: image, report and per-sentence boxes.

Each scene holds a few non-overlapping-ish shapes; every shape yields one
templated sentence and one tight pixel box. A fraction of samples drops its
boxes to mimic reports without region annotations.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .boxkit import iou

SHAPES = ("circle", "square", "triangle", "cross", "ring")
SIZES = ("small", "medium", "large")
INTENSITIES = ("bright", "dark")
REGIONS = ("upper-left", "upper-right", "lower-left", "lower-right", "center")

# radius as a fraction of the shorter image side (8 / 12 / 18 px at 128)
SIZE_FRACTION = {"small": 0.0625, "medium": 0.09375, "large": 0.140625}
INTENSITY_LEVEL = {"bright": 0.95, "dark": 0.05}
BACKGROUND = 0.5
# the center region is a middle square; quadrant objects keep their centers out of it
CENTER_FRACTION = (0.34375, 0.65625)

TEMPLATE = "there is a {size} {intensity} {shape} in the {region} region ."
GRAMMAR_WORDS = (
    ("there", "is", "a", "in", "the", "region") + SIZES + INTENSITIES + SHAPES + REGIONS
)
PUNCTUATION = (".",)

SPLITS = ("train", "test", "pool")


@dataclass
class GeneratorConfig:
    image_size: Tuple[int, int] = (128, 128)
    min_objects: int = 1
    max_objects: int = 4
    max_iou: float = 0.3
    max_attempts: int = 1000


@dataclass
class DatasetConfig:
    seed: int = 0
    train: int = 2000
    test: int = 200
    pool: int = 400
    p_nobox: float = 0.3
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if min(self.train, self.test, self.pool) < 0:
            raise ValueError("split sizes must be non-negative")
        if not 0.0 <= self.p_nobox <= 1.0:
            raise ValueError("p_nobox must lie in [0, 1]")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    size: str
    intensity: str
    region: str
    center_px: Tuple[float, float]
    radius_px: float

    @property
    def attributes(self):
        return (self.shape, self.size, self.intensity, self.region)

    def box(self) -> Tuple[float, float, float, float]:
        cx, cy = self.center_px
        r = self.radius_px
        return (cx - r, cy - r, cx + r, cy + r)


@dataclass
class Sample:
    image: np.ndarray
    sentences: List[str]
    boxes_per_sentence: Optional[List[List[Tuple[float, float, float, float]]]] = None
    id: str = ""

    @property
    def has_boxes(self) -> bool:
        return self.boxes_per_sentence is not None

    def __post_init__(self):
        if self.boxes_per_sentence is not None and len(self.boxes_per_sentence) != len(self.sentences):
            raise ValueError("boxes_per_sentence must align with sentences")


class SceneTooCrowded(RuntimeError):
    pass


def region_rect(region: str, image_size: Tuple[int, int]) -> Tuple[float, float, float, float]:
    h, w = image_size
    if region == "center":
        lo, hi = CENTER_FRACTION
        return (lo * w, lo * h, hi * w, hi * h)
    top = region.startswith("upper")
    left = region.endswith("left")
    x0 = 0.0 if left else w / 2
    y0 = 0.0 if top else h / 2
    return (x0, y0, x0 + w / 2, y0 + h / 2)


def _in_center(cx, cy, image_size) -> bool:
    x0, y0, x1, y1 = region_rect("center", image_size)
    return x0 <= cx < x1 and y0 <= cy < y1


def radius_for(size: str, image_size: Tuple[int, int]) -> float:
    return float(round(SIZE_FRACTION[size] * min(image_size)))


def _place(rng: np.random.Generator, region: str, r: float, image_size) -> Optional[Tuple[float, float]]:
    h, w = image_size
    x0, y0, x1, y1 = region_rect(region, image_size)
    # integer centers keep shape edges off pixel centers
    lo_x, hi_x = int(np.ceil(max(x0, r))), int(np.floor(min(x1, w - r) - 1e-9))
    lo_y, hi_y = int(np.ceil(max(y0, r))), int(np.floor(min(y1, h - r) - 1e-9))
    if lo_x > hi_x or lo_y > hi_y:
        return None
    for _ in range(20):
        cx = float(rng.integers(lo_x, hi_x + 1))
        cy = float(rng.integers(lo_y, hi_y + 1))
        if region == "center" or not _in_center(cx, cy, image_size):
            return (cx, cy)
    return None


def generate_scene(seed: int, config: GeneratorConfig | None = None) -> List[SceneObject]:
    """Sample 1..max_objects distinct objects with pairwise box IoU <= max_iou."""
    config = config or GeneratorConfig()
    if not 1 <= config.min_objects <= config.max_objects:
        raise ValueError("bad object-count range")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: List[SceneObject] = []
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > config.max_attempts:
            raise SceneTooCrowded(f"could not place {n} objects in {config.max_attempts} attempts")
        shape = SHAPES[rng.integers(len(SHAPES))]
        size = SIZES[rng.integers(len(SIZES))]
        intensity = INTENSITIES[rng.integers(len(INTENSITIES))]
        region = REGIONS[rng.integers(len(REGIONS))]
        if any(o.attributes == (shape, size, intensity, region) for o in objects):
            continue
        r = radius_for(size, config.image_size)
        center = _place(rng, region, r, config.image_size)
        if center is None:
            continue
        obj = SceneObject(shape, size, intensity, region, center, r)
        if all(iou(obj.box(), o.box()) <= config.max_iou for o in objects):
            objects.append(obj)
    return objects


def object_mask(obj: SceneObject, size: Tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the shape."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - obj.center_px[0]
    dy = ys + 0.5 - obj.center_px[1]
    r = obj.radius_px
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.6 * r) ** 2)
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if obj.shape == "triangle":
        # apex up, base on the bottom edge; the half-pixel slack keeps the apex row drawn
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & (np.abs(dx) <= (dy + r) / 2 + 0.5)
    if obj.shape == "cross":
        arm = r / 3
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    raise ValueError(f"unknown shape {obj.shape!r}")


def render_image(objects: Sequence[SceneObject], size: Tuple[int, int] = (128, 128)) -> np.ndarray:
    """Draw objects in order on a flat background; values in [0, 1]."""
    h, w = size
    img = np.full((h, w), BACKGROUND, dtype=np.float32)
    for obj in objects:
        x0, y0, x1, y1 = obj.box()
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise ValueError(f"object {obj} does not fit in {size}")
        img[object_mask(obj, size)] = INTENSITY_LEVEL[obj.intensity]
    return img


def sentence_for(obj: SceneObject) -> str:
    return TEMPLATE.format(size=obj.size, intensity=obj.intensity, shape=obj.shape, region=obj.region)


def realize_report(objects: Sequence[SceneObject], seed: int = 0):
    """One sentence and one singleton box list per object, in object order.

    ``seed`` is accepted for interface stability; the grammar has a single
    template so realization is deterministic.
    """
    if not objects:
        raise ValueError("cannot realize a report for an empty scene")
    sentences = [sentence_for(o) for o in objects]
    boxes = [[o.box()] for o in objects]
    return sentences, boxes


def vocabulary() -> List[str]:
    return list(GRAMMAR_WORDS) + list(PUNCTUATION)


def sample_sentences(sample: Sample | Sequence[str], n_min: int, n_max: int, seed: int) -> List[str]:
    """Random order-preserving subset of size clamp(U{n_min..n_max}, 1, len)."""
    sentences = sample.sentences if isinstance(sample, Sample) else list(sample)
    if not sentences:
        raise ValueError("no sentences to sample from")
    if n_min > n_max:
        raise ValueError("n_min must not exceed n_max")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_min, n_max + 1))
    n = max(1, min(n, len(sentences)))
    idx = np.sort(rng.choice(len(sentences), size=n, replace=False))
    return [sentences[i] for i in idx]


def _sample_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def make_sample(seed: int, config: GeneratorConfig, p_nobox: float, sample_id: str) -> Sample:
    objects = generate_scene(seed, config)
    image = render_image(objects, config.image_size)
    sentences, boxes = realize_report(objects, seed)
    drop = np.random.default_rng([seed, 1]).random() < p_nobox
    return Sample(image=image, sentences=sentences, boxes_per_sentence=None if drop else boxes, id=sample_id)


def iter_split(config: DatasetConfig, split: str):
    n = getattr(config, split)
    for i in range(n):
        s = _sample_seed(config.seed, split, i)
        yield make_sample(s, config.generator, config.p_nobox, f"{split}-{i:06d}")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def build_dataset(config: DatasetConfig, out_dir: str | os.PathLike) -> Dict[str, Path]:
    """Write PNG images plus one JSON-lines manifest per split.

    Returns a mapping split -> manifest path.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output path {out} is not writable: {exc}") from exc
    manifests = {}
    for split in SPLITS:
        img_dir = out / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        path = out / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for sample in iter_split(config, split):
                rel = f"images/{split}/{sample.id}.png"
                Image.fromarray(to_uint8(sample.image), mode="L").save(out / rel, optimize=False)
                boxes = None
                if sample.has_boxes:
                    boxes = [[list(b) for b in bl] for bl in sample.boxes_per_sentence]
                rec = {"id": sample.id, "image_path": rel, "sentences": sample.sentences, "boxes": boxes}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        manifests[split] = path
    meta = {"seed": config.seed, "config": asdict(config)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifests


def load_manifest(path: str | os.PathLike, load_images: bool = True) -> List[Sample]:
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            img = None
            if load_images:
                img = np.asarray(Image.open(root / rec["image_path"]), dtype=np.float32) / 255.0
            boxes = rec["boxes"]
            if boxes is not None:
                boxes = [[tuple(b) for b in bl] for bl in boxes]
            samples.append(Sample(image=img, sentences=rec["sentences"], boxes_per_sentence=boxes, id=rec["id"]))
    return samples


def generate_samples(config: DatasetConfig, split: str) -> List[Sample]:
    """In-memory equivalent of a split; pixel values are quantized like the PNGs."""
    out = []
    for s in iter_split(config, split):
        s.image = to_uint8(s.image).astype(np.float32) / 255.0
        out.append(s)
    return out
