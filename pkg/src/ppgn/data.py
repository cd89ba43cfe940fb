"""Synthetic grounding world: scene generation, rendering, annotations, and
image preprocessing.

Each scene is a dark canvas with 2-6 colored shapes and one referring phrase
per object. Phrases follow the grammar ``[size] color shape [position]`` and
are guaranteed to identify their target uniquely: a positional token is added
only when the attribute tokens alone are ambiguous (the generator may place
one duplicated attribute combination per scene). Images are re-rendered from
the annotation on demand, so a dataset on disk is a single JSON file.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, InvalidInputError
from .geometry import Box, iou as box_iou, letterbox

ANNOTATION_VERSION = "ppgn-synth-1"
IMAGE_MAGIC = b"PPGNIMG1"

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.85),
    "yellow": (0.90, 0.85, 0.20),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.60, 0.20, 0.75),
    "cyan": (0.15, 0.80, 0.80),
    "white": (0.95, 0.95, 0.95),
}
COLORS = tuple(PALETTE)
SIZES = ("small", "large")
POSITIONS = ("left", "right", "top", "bottom")
BACKGROUND = (0.08, 0.08, 0.11)

# Object side lengths as fractions of the image side. Both ends are pinned so
# every box clears IoU 0.5 against some located anchor even when its center
# falls on a cell corner of the finest grid, once anchors are clustered from
# the data.
SIZE_RANGES = {"small": (0.19, 0.23), "large": (0.25, 0.28)}
MAX_OBJECT_IOU = 0.3
MIN_PAIR_SEPARATION = 0.12
_SUPERSAMPLE = 3


def build_vocab() -> dict[str, int]:
    """Stable token-to-id mapping over the closed phrase vocabulary."""
    words = sorted(SHAPES + COLORS + SIZES + POSITIONS)
    return {w: i for i, w in enumerate(words)}


def tokenize(tokens, vocab: dict[str, int]) -> list[int]:
    ids = []
    for tok in tokens:
        if tok not in vocab:
            raise InvalidInputError(f"unknown token {tok!r}")
        ids.append(vocab[tok])
    if not ids:
        raise InvalidInputError("empty phrase")
    return ids


@dataclass(frozen=True)
class SceneObject:
    box: Box
    shape: str
    color: str
    size: str

    def matches(self, attr_tokens) -> bool:
        for tok in attr_tokens:
            if tok in SHAPES and tok != self.shape:
                return False
            if tok in COLORS and tok != self.color:
                return False
            if tok in SIZES and tok != self.size:
                return False
        return True


@dataclass(frozen=True)
class Phrase:
    tokens: tuple[str, ...]
    target: int


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[SceneObject, ...]
    phrases: tuple[Phrase, ...]


def split_of(scene_id: int) -> str:
    """Deterministic 80/10/10 split keyed on a stable hash of the scene id."""
    digest = hashlib.md5(f"scene-{scene_id}".encode()).hexdigest()
    bucket = int(digest, 16) % 10
    if bucket < 8:
        return "train"
    return "val" if bucket == 8 else "test"


def phrase_candidates(tokens, objects) -> list[int]:
    """Objects a phrase could refer to under the generator's semantics.

    Attribute tokens filter by equality; a positional token then keeps only
    the extreme candidate along its axis (ties keep everyone, i.e. the
    phrase fails to disambiguate).
    """
    attrs = [t for t in tokens if t not in POSITIONS]
    positions = [t for t in tokens if t in POSITIONS]
    cands = [i for i, o in enumerate(objects) if o.matches(attrs)]
    if not positions or len(cands) <= 1:
        return cands
    pos = positions[0]
    axis = {"left": 0, "right": 0, "top": 1, "bottom": 1}[pos]
    coords = [(objects[i].box.cx, objects[i].box.cy)[axis] for i in cands]
    best = min(coords) if pos in ("left", "top") else max(coords)
    return [i for i, c in zip(cands, coords) if c == best]


# -- rasterization -----------------------------------------------------------


def _inside(shape: str, box: Box, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    if shape == "square":
        return (np.abs(px - box.cx) <= box.w / 2) & (np.abs(py - box.cy) <= box.h / 2)
    if shape == "circle":
        nx = (px - box.cx) / (box.w / 2)
        ny = (py - box.cy) / (box.h / 2)
        return nx * nx + ny * ny <= 1.0
    if shape == "triangle":
        frac = (py - box.y1) / box.h
        return (frac >= 0) & (frac <= 1) & (np.abs(px - box.cx) <= (box.w / 2) * frac)
    raise InvalidInputError(f"unknown shape {shape!r}")


def _coverage(shape: str, box: Box, size: int) -> np.ndarray:
    """Per-pixel coverage in [0, 1] from a supersampled inside test."""
    s = _SUPERSAMPLE
    c0 = max(int(math.floor(box.x1 * size)) - 1, 0)
    c1 = min(int(math.ceil(box.x2 * size)) + 1, size)
    r0 = max(int(math.floor(box.y1 * size)) - 1, 0)
    r1 = min(int(math.ceil(box.y2 * size)) + 1, size)
    if c0 >= c1 or r0 >= r1:
        return np.zeros((size, size))
    sub = (np.arange(s) + 0.5) / s
    xs = ((np.arange(c0, c1)[:, None] + sub[None, :]).reshape(-1)) / size
    ys = ((np.arange(r0, r1)[:, None] + sub[None, :]).reshape(-1)) / size
    hit = _inside(shape, box, xs[None, :], ys[:, None])
    hit = hit.reshape(r1 - r0, s, c1 - c0, s).mean(axis=(1, 3))
    cov = np.zeros((size, size))
    cov[r0:r1, c0:c1] = hit
    return cov


def render_scene(scene: Scene, image_size: int) -> np.ndarray:
    """Deterministic (H, W, 3) float32 image in [0, 1] from the annotation."""
    img = np.broadcast_to(np.asarray(BACKGROUND), (image_size, image_size, 3)).copy()
    for obj in scene.objects:
        cov = _coverage(obj.shape, obj.box, image_size)[:, :, None]
        img = img * (1.0 - cov) + np.asarray(PALETTE[obj.color]) * cov
    return img.astype(np.float32)


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.zeros_like(mask)
            rs = slice(max(dr, 0), mask.shape[0] + min(dr, 0))
            rd = slice(max(-dr, 0), mask.shape[0] + min(-dr, 0))
            cs = slice(max(dc, 0), mask.shape[1] + min(dc, 0))
            cd = slice(max(-dc, 0), mask.shape[1] + min(-dc, 0))
            shifted[rd, cd] = mask[rs, cs]
            out |= shifted
    return out


# -- scene generation --------------------------------------------------------


def _all_combos() -> list[tuple[str, str, str]]:
    return [(sh, c, sz) for sh in SHAPES for c in COLORS for sz in SIZES]


def _choose_combos(rng, n: int, duplicate: bool, pending: dict[str, list[str]] | None):
    # A duplicated pair spends one slot of the object budget.
    n_unique = n - 1 if duplicate and n >= 3 else n
    duplicate = n_unique < n
    chosen: list[tuple[str, str, str]] = []
    for _ in range(n_unique):
        want_shape = pending["shape"][0] if pending and pending["shape"] else None
        want_color = pending["color"][0] if pending and pending["color"] else None
        want_size = pending["size"][0] if pending and pending["size"] else None
        pool = [
            cmb
            for cmb in _all_combos()
            if cmb not in chosen
            and (want_shape is None or cmb[0] == want_shape)
            and (want_color is None or cmb[1] == want_color)
            and (want_size is None or cmb[2] == want_size)
        ]
        combo = pool[int(rng.integers(len(pool)))]
        chosen.append(combo)
        if pending:
            for key, value in zip(("shape", "color", "size"), combo):
                if value in pending[key]:
                    pending[key].remove(value)
    pair = None
    if duplicate:
        partner = int(rng.integers(len(chosen)))
        chosen.append(chosen[partner])
        pair = (partner, len(chosen) - 1)
    return chosen, pair


def _sample_box(rng, size_class: str, shape: str) -> Box:
    lo, hi = SIZE_RANGES[size_class]
    h = float(rng.uniform(lo, hi))
    w = h
    if shape == "triangle":  # squash one side so the long side stays capped
        ratio = float(rng.uniform(0.92, 1.0))
        if rng.random() < 0.5:
            w = h * ratio
        else:
            w, h = h, h * ratio
    margin = 0.02
    cx = float(rng.uniform(w / 2 + margin, 1 - w / 2 - margin))
    cy = float(rng.uniform(h / 2 + margin, 1 - h / 2 - margin))
    return Box(cx, cy, w, h)


def _separated(a: Box, b: Box) -> bool:
    return (
        abs(a.cx - b.cx) >= MIN_PAIR_SEPARATION
        or abs(a.cy - b.cy) >= MIN_PAIR_SEPARATION
    )


def _place_objects(rng, combos, pair, image_size: int):
    occupied = np.zeros((image_size, image_size), dtype=bool)
    objects: list[SceneObject] = []
    for idx, (shape, color, size_class) in enumerate(combos):
        placed = False
        for _ in range(200):
            box = _sample_box(rng, size_class, shape)
            if any(box_iou(box, o.box) > MAX_OBJECT_IOU for o in objects):
                continue
            if pair and idx == pair[1] and not _separated(box, objects[pair[0]].box):
                continue
            mask = _dilate(_coverage(shape, box, image_size) > 0, 2)
            if (mask & occupied).any():
                continue
            occupied |= mask
            objects.append(SceneObject(box, shape, color, size_class))
            placed = True
            break
        if not placed:
            return None
    return objects


def _make_phrase(rng, objects, target: int):
    obj = objects[target]
    base = (obj.color, obj.shape)
    if len(phrase_candidates(base, objects)) == 1:
        if rng.random() < 0.35:  # sometimes add the (redundant) size token
            return (obj.size,) + base
        return base
    sized = (obj.size, obj.color, obj.shape)
    if len(phrase_candidates(sized, objects)) == 1:
        return sized
    for pos in POSITIONS:
        tokens = sized + (pos,)
        if phrase_candidates(tokens, objects) == [target]:
            return tokens
    return None


def _generate_scene(scene_id: int, seed: int, image_size: int, pending):
    rng = np.random.default_rng([seed, scene_id])
    is_train = split_of(scene_id) == "train"
    n = int(rng.integers(2, 7))
    duplicate = bool(rng.random() < 0.3)
    for attempt in range(30):
        # Coverage bookkeeping is committed only if the attempt succeeds.
        trial = {k: list(v) for k, v in pending.items()} if is_train else None
        n_eff = max(2, n - attempt // 5)  # relax crowding if placement struggles
        combos, pair = _choose_combos(rng, n_eff, duplicate, trial)
        objects = _place_objects(rng, combos, pair, image_size)
        if objects is None:
            continue
        phrases = []
        for i in range(len(objects)):
            tokens = _make_phrase(rng, objects, i)
            if tokens is None or phrase_candidates(tokens, objects) != [i]:
                phrases = None
                break
            phrases.append(Phrase(tuple(tokens), i))
        if phrases is not None:
            if is_train:
                for key in pending:
                    pending[key][:] = trial[key]
            return Scene(scene_id, tuple(objects), tuple(phrases))
    raise ConsistencyError(f"could not generate scene {scene_id}")


class World:
    """A generated dataset: scenes plus the header needed to reproduce it."""

    def __init__(self, image_size: int, seed: int, scenes, mean_pixel):
        self.image_size = image_size
        self.seed = seed
        self.scenes = list(scenes)
        self.mean_pixel = np.asarray(mean_pixel, dtype=np.float64)

    def scenes_in(self, split: str) -> list[Scene]:
        if split not in ("train", "val", "test"):
            raise InvalidInputError(f"unknown split {split!r}")
        return [s for s in self.scenes if split_of(s.scene_id) == split]

    def scene_by_id(self, scene_id: int) -> Scene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise InvalidInputError(f"no scene with id {scene_id}")

    def render(self, scene: Scene) -> np.ndarray:
        return render_scene(scene, self.image_size)

    def gt_sizes(self, split: str) -> list[tuple[float, float]]:
        return [
            (o.box.w, o.box.h) for s in self.scenes_in(split) for o in s.objects
        ]

    def samples(self, split: str) -> list[tuple[Scene, Phrase]]:
        return [(s, p) for s in self.scenes_in(split) for p in s.phrases]

    def to_json(self) -> str:
        doc = {
            "version": ANNOTATION_VERSION,
            "image_size": self.image_size,
            "seed": self.seed,
            "mean_pixel": [float(v) for v in self.mean_pixel],
            "scenes": [
                {
                    "id": s.scene_id,
                    "objects": [
                        {
                            "box": [o.box.cx, o.box.cy, o.box.w, o.box.h],
                            "attrs": {
                                "shape": o.shape, "color": o.color, "size": o.size,
                            },
                        }
                        for o in s.objects
                    ],
                    "phrases": [
                        {"tokens": list(p.tokens), "target": p.target}
                        for p in s.phrases
                    ],
                }
                for s in self.scenes
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @staticmethod
    def from_json(text: str) -> "World":
        doc = json.loads(text)
        if doc.get("version") != ANNOTATION_VERSION:
            raise InvalidInputError(
                f"unsupported annotation version {doc.get('version')!r}"
            )
        scenes = []
        for s in doc["scenes"]:
            objects = tuple(
                SceneObject(
                    Box(*o["box"]),
                    o["attrs"]["shape"], o["attrs"]["color"], o["attrs"]["size"],
                )
                for o in s["objects"]
            )
            phrases = tuple(
                Phrase(tuple(p["tokens"]), int(p["target"])) for p in s["phrases"]
            )
            for p in phrases:
                if not 0 <= p.target < len(objects):
                    raise InvalidInputError(
                        f"phrase target {p.target} out of range in scene {s['id']}"
                    )
            scenes.append(Scene(int(s["id"]), objects, phrases))
        return World(int(doc["image_size"]), int(doc["seed"]), scenes,
                     doc["mean_pixel"])

    @staticmethod
    def load(path) -> "World":
        return World.from_json(Path(path).read_text(encoding="utf-8"))


def generate_world(num_scenes: int, seed: int, image_size: int = 128) -> World:
    """Deterministically build a world of ``num_scenes`` scenes."""
    if num_scenes < 1:
        raise InvalidInputError(f"num_scenes must be >= 1, got {num_scenes}")
    if image_size < 16:
        raise InvalidInputError(f"image_size too small: {image_size}")
    pending = {
        "shape": list(SHAPES), "color": list(COLORS), "size": list(SIZES),
    }
    scenes = [
        _generate_scene(sid, seed, image_size, pending) for sid in range(num_scenes)
    ]
    world = World(image_size, seed, scenes, (0.0, 0.0, 0.0))
    train = world.scenes_in("train")
    if train:
        acc = np.zeros(3)
        for s in train:
            acc += world.render(s).mean(axis=(0, 1))
        world.mean_pixel = acc / len(train)
    else:
        world.mean_pixel = np.asarray(BACKGROUND, dtype=np.float64)
    return world


# -- preprocessing and image files -------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def preprocess(image: np.ndarray, mean_pixel, target: int):
    """Letterbox an (H, W, 3) image into a mean-padded square network input.

    Returns the (target, target, 3) float32 input and the transform used,
    so ground-truth boxes can be mapped into network coordinates.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    tfm = letterbox(w, h, target)
    content_w = int(round(w * tfm.scale))
    content_h = int(round(h * tfm.scale))
    resized = _resize_bilinear(np.asarray(image, dtype=np.float64), content_h, content_w)
    canvas = np.empty((target, target, 3), dtype=np.float64)
    canvas[:, :] = np.asarray(mean_pixel, dtype=np.float64)
    ox = min(int(round(tfm.pad_x)), target - content_w)
    oy = min(int(round(tfm.pad_y)), target - content_h)
    canvas[oy : oy + content_h, ox : ox + content_w] = resized
    return canvas.astype(np.float32), tfm


def write_image_file(path, image: np.ndarray):
    """Raw float32 dump: 8-byte magic, u32 height, u32 width, then HWC data."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    payload = IMAGE_MAGIC + struct.pack("<II", h, w)
    payload += np.ascontiguousarray(image, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_image_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != IMAGE_MAGIC:
        raise InvalidInputError(f"{path} is not an image dump")
    h, w = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != h * w * 3:
        raise InvalidInputError(f"truncated image dump {path}")
    return data.reshape(h, w, 3).copy()
