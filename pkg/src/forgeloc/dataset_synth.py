"""Procedural edited-image corpus.

Scenes are flat-shaded shapes over a muted procedural background with a
per-image level of sensor noise. An edit changes one object (replace, recolor,
remove, insert) and is composited back in one of two styles:

* family ``A`` pastes the edited content with hard edges, its noise at a
  different level from the rest of the image (none, weaker or stronger);
* family ``B`` alpha-blends a slightly blurred version of the content with a
  feathered matte and re-synthesised noise, so its traces look different.

Everything is a pure function of the seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

NOUNS = (
    "apple", "orange", "dog", "cat", "ball", "box", "hat", "cup",
    "kite", "leaf", "star", "moon", "fish", "bird", "car", "tree",
)
VERBS = ("edit", "replace", "change", "turn", "remove", "add")
OPS = ("replace", "recolor", "remove", "insert")
SHAPES = ("rect", "circle", "triangle")
FAMILIES = ("A", "B")
BACKGROUND = "background"

# verbs allowed per op; "replace" as a verb selects the alternate phrasing
OP_VERBS = {
    "replace": ("replace", "edit"),
    "recolor": ("change", "turn"),
    "remove": ("remove",),
    "insert": ("add",),
}

MIN_SIZE = 32
MAX_SIZE = 256
NOISE_SIGMA = 0.02
CHANGE_TOL = 1.0 / 255.0
N_TEXTURES = 4


def _hue_color(h: float) -> tuple[float, float, float]:
    import colorsys

    r, g, b = colorsys.hsv_to_rgb(h, 0.9, 0.95)
    return (round(r, 4), round(g, 4), round(b, 4))


# each noun has a canonical shape and a distinct saturated colour
CLASS_SHAPE = {n: SHAPES[i % 3] for i, n in enumerate(NOUNS)}
CLASS_COLOR = {n: _hue_color(((i * 7) % 16) / 16.0) for i, n in enumerate(NOUNS)}


class MissingObjectError(LookupError):
    """The edit refers to an object that is not in the scene."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    name: str
    color: tuple[float, float, float]
    bbox: tuple[int, int, int, int]  # y0, x0, y1, x1 (exclusive)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: tuple[int, int]
    objects: tuple[SceneObject, ...]
    background: int

    def find(self, name: str) -> int:
        for i, obj in enumerate(self.objects):
            if obj.name == name:
                return i
        raise MissingObjectError(f"no {name!r} in scene {self.seed}")


@dataclass(frozen=True)
class EditSpec:
    family: str
    op: str
    verb: str
    original: str
    edited: str
    region: tuple[int, int, int, int]  # y0, x0, y1, x1
    color: tuple[float, float, float] | None = None


@dataclass
class EditedSample:
    id: str
    image: np.ndarray  # H x W x 3 float in [0, 1], the edited image
    mask: np.ndarray  # H x W uint8 in {0, 1}
    instruction: str
    family: str
    seed: int
    source: np.ndarray | None = field(default=None, repr=False)
    split: str = ""


@dataclass
class CorpusConfig:
    train: int = 32
    seen: int = 16
    unseen: int = 16
    size: int = 64
    seed: int = 0


@dataclass
class CorpusManifest:
    root: Path
    splits: dict[str, list[dict]]
    vocab_seed: int

    def records(self, split: str) -> list[dict]:
        if split not in self.splits:
            raise KeyError(f"split {split!r} not in corpus ({sorted(self.splits)})")
        return self.splits[split]

    def instructions(self) -> list[str]:
        return [r["instruction"] for recs in self.splits.values() for r in recs]

    def load(self, split: str) -> list[EditedSample]:
        out = []
        for r in self.records(split):
            img = np.asarray(Image.open(self.root / r["image"]).convert("RGB"), dtype=np.float64) / 255.0
            mask = (np.asarray(Image.open(self.root / r["mask"]).convert("L")) > 127).astype(np.uint8)
            out.append(EditedSample(r["id"], img, mask, r["instruction"], r["family"], r["seed"], split=split))
        return out

    def digest(self) -> str:
        return hashlib.sha256((self.root / "manifest.jsonl").read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# scene generation


def _check_size(size) -> tuple[int, int]:
    h, w = (size, size) if isinstance(size, int) else tuple(size)
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"image size must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    if h > MAX_SIZE or w > MAX_SIZE:
        raise ValueError(f"image size must be at most {MAX_SIZE}x{MAX_SIZE}, got {h}x{w}")
    return int(h), int(w)


def _random_bbox(rng: np.random.Generator, h: int, w: int) -> tuple[int, int, int, int]:
    lo, hi = max(6, min(h, w) * 3 // 16), max(8, min(h, w) * 11 // 32)
    bh, bw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return (y0, x0, y0 + bh, x0 + bw)


def generate_scene(seed: int, size=(64, 64)) -> SceneSpec:
    """Deterministic scene with 2-5 objects of distinct classes."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    h, w = _check_size(size)
    rng = np.random.default_rng([seed, 0x5CE7E])
    n = int(rng.integers(2, 6))
    names = rng.choice(len(NOUNS), size=n, replace=False)
    objects = []
    for k in names:
        name = NOUNS[int(k)]
        objects.append(SceneObject(CLASS_SHAPE[name], name, CLASS_COLOR[name], _random_bbox(rng, h, w)))
    return SceneSpec(seed, (h, w), tuple(objects), int(rng.integers(0, N_TEXTURES)))


def _texture(kind: int, h: int, w: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E27])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    if kind == 0:
        base = 0.4 + 0.2 * yy
    elif kind == 1:
        base = 0.5 + 0.08 * np.sin(2 * np.pi * (3 + 3 * rng.random()) * yy)
    elif kind == 2:
        base = np.full((h, w), 0.5)
        for _ in range(3):
            fy, fx, ph = rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0, 2 * np.pi)
            base += 0.05 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    else:
        base = 0.38 + 0.12 * (xx + yy)
    tint = rng.uniform(-0.04, 0.04, size=3)
    return np.clip(base[..., None] + tint, 0.3, 0.7)


def _shape_mask(shape: str, bbox, h: int, w: int) -> np.ndarray:
    y0, x0, y1, x1 = bbox
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    if shape == "rect":
        return inside
    cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
    ry, rx = (y1 - y0) / 2.0, (x1 - x0) / 2.0
    if shape == "circle":
        return inside & (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0)
    # isoceles triangle, apex at the top
    t = (yy - y0 + 0.5) / (y1 - y0)
    return inside & (np.abs(xx - cx) <= t * rx)


def render_clean(scene: SceneSpec) -> np.ndarray:
    """Noise-free rendering, objects painted in list order."""
    h, w = scene.size
    img = _texture(scene.background, h, w, scene.seed).copy()
    for obj in scene.objects:
        m = _shape_mask(obj.shape, obj.bbox, h, w)
        img[m] = obj.color
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_source(scene: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng([scene.seed, 0x5E25])
    clean = render_clean(scene)
    return _quantize(clean + rng.normal(0.0, NOISE_SIGMA, size=clean.shape))


# ---------------------------------------------------------------------------
# edits


def render_instruction(edit: EditSpec) -> str:
    if edit.verb == "replace":
        return f"replace {_article(edit.original)} {edit.original} with {_article(edit.edited)} {edit.edited}"
    return f"{edit.verb} {edit.original} to {edit.edited}"


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def sample_edit(scene: SceneSpec, family: str, rng: np.random.Generator) -> EditSpec:
    """Draw a random edit that is valid for ``scene``."""
    h, w = scene.size
    op = OPS[int(rng.integers(len(OPS)))]
    verb = OP_VERBS[op][int(rng.integers(len(OP_VERBS[op])))]
    present = [o.name for o in scene.objects]
    absent = [n for n in NOUNS if n not in present]
    if op == "insert":
        new = absent[int(rng.integers(len(absent)))]
        return EditSpec(family, op, verb, BACKGROUND, new, _random_bbox(rng, h, w))
    target = scene.objects[int(rng.integers(len(scene.objects)))]
    if op == "remove":
        return EditSpec(family, op, verb, target.name, BACKGROUND, target.bbox)
    if op == "recolor":
        pool = [n for n in absent if CLASS_SHAPE[n] == target.shape] or absent
    else:
        pool = [n for n in absent if CLASS_SHAPE[n] != target.shape] or absent
    new = pool[int(rng.integers(len(pool)))]
    return EditSpec(family, op, verb, target.name, new, target.bbox)


def edited_scene(scene: SceneSpec, edit: EditSpec) -> SceneSpec:
    h, w = scene.size
    y0, x0, y1, x1 = edit.region
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ValueError(f"edit region {edit.region} outside image {h}x{w}")
    objs = list(scene.objects)
    if edit.op == "insert":
        name = edit.edited
        color = edit.color or CLASS_COLOR[name]
        objs.append(SceneObject(CLASS_SHAPE[name], name, color, edit.region))
        return dc_replace(scene, objects=tuple(objs))
    i = scene.find(edit.original)
    obj = objs[i]
    if edit.op == "remove":
        del objs[i]
    elif edit.op == "recolor":
        color = edit.color or CLASS_COLOR.get(edit.edited, obj.color)
        objs[i] = dc_replace(obj, name=edit.edited, color=color, bbox=edit.region)
    else:
        name = edit.edited
        objs[i] = SceneObject(CLASS_SHAPE[name], name, edit.color or CLASS_COLOR[name], edit.region)
    return dc_replace(scene, objects=tuple(objs))


def _close(mask: np.ndarray) -> np.ndarray:
    # pad so closing does not erode along the image border
    padded = np.pad(mask, 2)
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), bool))
    return closed[2:-2, 2:-2]


def changed_pixels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).max(axis=-1) > CHANGE_TOL + 1e-9


def _composite(source: np.ndarray, before: np.ndarray, after: np.ndarray, family: str, seed: int) -> np.ndarray:
    region = changed_pixels(before, after)
    rng = np.random.default_rng([seed, 0xB1E4D])
    if family == "A":
        # hard paste of noise-free content
        out = source.copy()
        out[region] = after[region]
        return _quantize(out)
    alpha = ndimage.gaussian_filter(region.astype(np.float64), sigma=1.0)
    alpha = np.where(alpha < 0.05, 0.0, np.minimum(1.0, alpha * 1.6))
    alpha = np.maximum(alpha, region)[..., None]
    content = ndimage.gaussian_filter(after, sigma=(0.8, 0.8, 0)) + rng.normal(0.0, NOISE_SIGMA, size=after.shape)
    return _quantize((1.0 - alpha) * source + alpha * content)


def apply_edit(scene: SceneSpec, edit: EditSpec, seed: int, sample_id: str = "") -> EditedSample:
    """Render ``scene`` and its edited version; mask is the closed changed-pixel set."""
    after_scene = edited_scene(scene, edit)
    before = render_clean(scene)
    after = render_clean(after_scene)
    source = render_source(scene)
    image = _composite(source, before, after, edit.family, seed)
    mask = _close(changed_pixels(source, image)).astype(np.uint8)
    if mask.sum() == 0:
        raise ValueError("edit produced no visible change")
    return EditedSample(sample_id or f"s{seed}", image, mask, render_instruction(edit), edit.family, seed, source=source)


def make_sample(seed: int, family: str, size=(64, 64), sample_id: str = "") -> EditedSample:
    """Scene + random edit, resampling edits until the mask constraints hold."""
    scene = generate_scene(seed, size)
    h, w = scene.size
    rng = np.random.default_rng([seed, 0xED17])
    for _ in range(64):
        edit = sample_edit(scene, family, rng)
        try:
            s = apply_edit(scene, edit, seed, sample_id)
        except ValueError:
            continue
        if 1 <= s.mask.sum() <= 0.5 * h * w:
            return s
    raise RuntimeError(f"could not produce a valid edit for seed {seed}")


# ---------------------------------------------------------------------------
# corpus


SPLIT_FAMILY = {"train": "A", "seen": "A", "unseen": "B"}


def split_seeds(cfg: CorpusConfig) -> dict[str, list[int]]:
    base = cfg.seed * 1_000_003
    n = {"train": cfg.train, "seen": cfg.seen, "unseen": cfg.unseen}
    out, start = {}, base
    for name in ("train", "seen", "unseen"):
        out[name] = list(range(start, start + n[name]))
        start += n[name]
    return out


def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def build_corpus(cfg: CorpusConfig, out: str | os.PathLike, workers: int = 1) -> CorpusManifest:
    for name in ("train", "seen", "unseen"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"split {name!r} needs at least one sample")
    size = _check_size(cfg.size)
    root = Path(out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"{root} is not writable")

    jobs = []
    for split, seeds in split_seeds(cfg).items():
        for i, s in enumerate(seeds):
            jobs.append((split, f"{split}_{i:05d}", s))

    def work(job):
        split, sid, s = job
        sample = make_sample(s, SPLIT_FAMILY[split], size, sid)
        _save_png(root / "images" / f"{sid}.png", np.round(sample.image * 255).astype(np.uint8))
        _save_png(root / "masks" / f"{sid}.png", (sample.mask * 255).astype(np.uint8))
        return {
            "id": sid,
            "image": f"images/{sid}.png",
            "mask": f"masks/{sid}.png",
            "instruction": sample.instruction,
            "family": sample.family,
            "seed": s,
            "split": split,
        }

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(work, jobs))
    else:
        records = [work(j) for j in jobs]

    with open(root / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    meta = {"config": cfg.__dict__, "vocab_seed": cfg.seed}
    (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return load_corpus(root)


def load_corpus(root: str | os.PathLike) -> CorpusManifest:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    splits: dict[str, list[dict]] = {}
    for line in path.read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            splits.setdefault(r["split"], []).append(r)
    vocab_seed = 0
    meta = root / "corpus.json"
    if meta.exists():
        vocab_seed = json.loads(meta.read_text()).get("vocab_seed", 0)
    return CorpusManifest(root, splits, vocab_seed)
