"""Synthetic occlusion scenes with exact amodal, visible and occluding masks."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import rle

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "aisdiff-synth/1"
DEFAULT_CATEGORIES = ("circle", "square", "triangle", "ellipse", "bar")

# fixed base colour per shape kind; unknown category names get a hashed colour
BASE_COLORS = {
    "circle": (0.86, 0.22, 0.20),
    "square": (0.18, 0.72, 0.26),
    "triangle": (0.20, 0.36, 0.90),
    "ellipse": (0.92, 0.80, 0.14),
    "bar": (0.74, 0.24, 0.80),
}

MIN_OCCLUDED_RATIO = 0.10
MIN_VISIBLE_RATIO = 0.20
MAX_ATTEMPTS = 1000


class SceneError(ValueError):
    """Invalid configuration or violated instance invariant."""


class GenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 128
    instances_per_scene: Tuple[int, int] = (2, 4)
    categories: Tuple[str, ...] = DEFAULT_CATEGORIES
    min_occlusion_fraction: float = 0.5
    size_range: Tuple[float, float] = (0.2, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.instances_per_scene = tuple(int(v) for v in self.instances_per_scene)
        self.categories = tuple(self.categories)
        self.size_range = tuple(float(v) for v in self.size_range)

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 4:
            raise SceneError(f"image_size must be >= 32 and a multiple of 4, got {self.image_size}")
        lo, hi = self.instances_per_scene
        if not 2 <= lo <= hi <= 6:
            raise SceneError(f"instances_per_scene must lie within [2, 6], got {self.instances_per_scene}")
        if not self.categories or len(set(self.categories)) != len(self.categories):
            raise SceneError("categories must be nonempty and unique")
        if not 0.0 <= self.min_occlusion_fraction < 1.0:
            raise SceneError("min_occlusion_fraction must lie in [0, 1)")
        smin, smax = self.size_range
        if not 0.2 <= smin <= smax <= 0.5:
            raise SceneError(f"size_range must lie within [0.2, 0.5], got {self.size_range}")
        if not 0 <= int(self.seed) < 2**64:
            raise SceneError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instances_per_scene"] = list(self.instances_per_scene)
        d["categories"] = list(self.categories)
        d["size_range"] = list(self.size_range)
        return d


@dataclass(eq=False)
class InstanceRecord:
    instance_id: int
    category_id: int
    amodal_mask: np.ndarray
    visible_mask: np.ndarray
    occluding_mask: np.ndarray
    bbox: Tuple[int, int, int, int]
    depth_rank: int

    @property
    def occlusion_ratio(self) -> float:
        area = int(self.amodal_mask.sum())
        if area == 0:
            return 0.0
        return 1.0 - int(self.visible_mask.sum()) / area

    def equals(self, other: "InstanceRecord") -> bool:
        return (
            self.instance_id == other.instance_id
            and self.category_id == other.category_id
            and tuple(self.bbox) == tuple(other.bbox)
            and self.depth_rank == other.depth_rank
            and np.array_equal(self.amodal_mask, other.amodal_mask)
            and np.array_equal(self.visible_mask, other.visible_mask)
            and np.array_equal(self.occluding_mask, other.occluding_mask)
        )


@dataclass(eq=False)
class Scene:
    scene_id: int
    image: np.ndarray  # H x W x 3 float32 in [0, 1], on the 8-bit grid
    instances: List[InstanceRecord] = field(default_factory=list)
    seed_used: int = 0

    @property
    def image_size(self) -> int:
        return self.image.shape[0]

    def equals(self, other: "Scene") -> bool:
        return (
            self.scene_id == other.scene_id
            and self.seed_used == other.seed_used
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and len(self.instances) == len(other.instances)
            and all(a.equals(b) for a, b in zip(self.instances, other.instances))
        )


@dataclass
class ShapeSpec:
    """Analytic primitive. ``rx``/``ry`` are half extents (radius for circles
    and triangles, semi-axes for ellipses, half sides for squares and bars)."""

    category: str
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float = 0.0


def category_color(name: str) -> np.ndarray:
    if name in BASE_COLORS:
        return np.array(BASE_COLORS[name], dtype=np.float64)
    rng = np.random.default_rng(sum(ord(c) * (i + 1) for i, c in enumerate(name)))
    return rng.uniform(0.15, 0.9, size=3)


def _kind(category: str) -> str:
    for kind in DEFAULT_CATEGORIES:
        if category == kind:
            return kind
    return DEFAULT_CATEGORIES[sum(map(ord, category)) % len(DEFAULT_CATEGORIES)]


def rasterize(spec: ShapeSpec, image_size: int) -> np.ndarray:
    """Pixel is inside iff its centre is strictly inside the primitive."""
    coords = np.arange(image_size, dtype=np.float64) + 0.5
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - spec.cx, y - spec.cy
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    kind = _kind(spec.category)
    if kind == "circle":
        return dx * dx + dy * dy < spec.rx * spec.rx
    if kind in ("square", "bar"):
        return (np.abs(u) < spec.rx) & (np.abs(v) < spec.ry)
    if kind == "ellipse":
        return (u / spec.rx) ** 2 + (v / spec.ry) ** 2 < 1.0
    # equilateral triangle with circumradius rx: inside all three edge half-planes
    inside = np.ones_like(u, dtype=bool)
    apothem = spec.rx * 0.5
    for k in range(3):
        phi = 2.0 * math.pi * k / 3.0 + math.pi
        inside &= u * math.cos(phi) + v * math.sin(phi) < apothem
    return inside


def tight_bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return (0, 0, 0, 0)
    x0, y0 = int(xs.min()), int(ys.min())
    return (x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)


def box_mask(bbox: Sequence[int], image_size: int) -> np.ndarray:
    x, y, w, h = bbox
    out = np.zeros((image_size, image_size), dtype=bool)
    out[y:y + h, x:x + w] = True
    return out


def compose_scene(
    shapes: Sequence[ShapeSpec],
    depth_ranks: Sequence[int],
    categories: Sequence[str],
    image_size: int,
    colors: Optional[Sequence[np.ndarray]] = None,
    background: float = 0.5,
    noise: Optional[np.ndarray] = None,
    scene_id: int = 0,
    seed_used: int = 0,
) -> Scene:
    """Rasterize shapes and derive per-instance masks; depth rank 0 is frontmost."""
    amodal = [rasterize(s, image_size) for s in shapes]
    if colors is None:
        colors = [category_color(s.category) for s in shapes]
    n = len(shapes)
    instances = []
    for i in range(n):
        front = np.zeros((image_size, image_size), dtype=bool)
        for j in range(n):
            if depth_ranks[j] < depth_ranks[i]:
                front |= amodal[j]
        bbox = tight_bbox(amodal[i])
        instances.append(InstanceRecord(
            instance_id=i,
            category_id=list(categories).index(shapes[i].category),
            amodal_mask=amodal[i],
            visible_mask=amodal[i] & ~front,
            occluding_mask=front & box_mask(bbox, image_size),
            bbox=bbox,
            depth_rank=int(depth_ranks[i]),
        ))

    image = np.full((image_size, image_size, 3), background, dtype=np.float64)
    for i in sorted(range(n), key=lambda k: -depth_ranks[k]):
        image[amodal[i]] = colors[i]
    if noise is not None:
        image = image + noise
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Scene(scene_id=scene_id, image=image.astype(np.float32) / np.float32(255.0),
                 instances=instances, seed_used=seed_used)


def _sample_shape(rng: np.random.Generator, category: str, config: SceneConfig) -> ShapeSpec:
    size = config.image_size
    r = 0.5 * rng.uniform(*config.size_range) * size
    cx, cy = rng.uniform(r + 1.0, size - r - 1.0, size=2)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    kind = _kind(category)
    if kind == "square":
        rx = ry = r / math.sqrt(2.0)
    elif kind == "ellipse":
        rx, ry = r, r * rng.uniform(0.45, 0.75)
    elif kind == "bar":
        rx, ry = r, r * rng.uniform(0.2, 0.32)
    else:
        rx = ry = r
    return ShapeSpec(category, float(cx), float(cy), float(rx), float(ry), float(angle))


def scene_seed(seed: int, scene_index: int) -> int:
    state = np.random.SeedSequence([int(seed), int(scene_index)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def generate_scene(config: SceneConfig, scene_index: int) -> Scene:
    """Deterministic in ``(config.seed, scene_index)``; rejection-samples until
    the occlusion quota holds and every instance keeps some visible area."""
    config.validate()
    seed_used = scene_seed(config.seed, scene_index)
    rng = np.random.default_rng(seed_used)
    size = config.image_size
    lo, hi = config.instances_per_scene
    for _ in range(MAX_ATTEMPTS):
        n = int(rng.integers(lo, hi + 1))
        cats = [config.categories[k] for k in rng.integers(0, len(config.categories), size=n)]
        shapes = [_sample_shape(rng, c, config) for c in cats]
        depth = [int(d) for d in rng.permutation(n)]
        colors = [np.clip(category_color(c) * rng.uniform(0.8, 1.1), 0.0, 1.0) for c in cats]
        background = rng.uniform(0.35, 0.65)
        noise = rng.normal(0.0, 0.03, size=(size, size, 3))
        scene = compose_scene(shapes, depth, config.categories, size, colors, background,
                              noise, scene_id=scene_index, seed_used=seed_used)
        ratios = [inst.occlusion_ratio for inst in scene.instances]
        if max(ratios) > 1.0 - MIN_VISIBLE_RATIO:
            continue
        if any(int(inst.amodal_mask.sum()) == 0 for inst in scene.instances):
            continue
        occluded = sum(r >= MIN_OCCLUDED_RATIO for r in ratios)
        if occluded >= config.min_occlusion_fraction * n:
            return scene
    raise GenerationError(
        f"scene {scene_index}: occlusion quota not met after {MAX_ATTEMPTS} attempts")


def generate_scenes(config: SceneConfig, count: int, start: int = 0) -> List[Scene]:
    return [generate_scene(config, start + i) for i in range(count)]


def validate_instance(inst: InstanceRecord, image_size: int) -> None:
    shape = (image_size, image_size)
    for name in ("amodal_mask", "visible_mask", "occluding_mask"):
        if getattr(inst, name).shape != shape:
            raise SceneError(f"instance {inst.instance_id}: {name} has shape "
                             f"{getattr(inst, name).shape}, expected {shape}")
    a, v, o = inst.amodal_mask, inst.visible_mask, inst.occluding_mask
    if np.any(v & ~a):
        raise SceneError(f"instance {inst.instance_id}: visible mask not contained in amodal mask")
    if np.any(v & o):
        raise SceneError(f"instance {inst.instance_id}: visible and occluding masks overlap")
    if tuple(inst.bbox) != tight_bbox(a):
        raise SceneError(f"instance {inst.instance_id}: bbox {inst.bbox} is not the tight amodal box")
    inside = box_mask(inst.bbox, image_size)
    if np.any(o & ~inside):
        raise SceneError(f"instance {inst.instance_id}: occluding mask leaves the amodal box")
    if np.any(a & ~v & ~o):
        raise SceneError(f"instance {inst.instance_id}: hidden amodal pixels not covered by occluders")


def default_splits(count: int, val_frac: float = 0.1, test_frac: float = 0.1) -> Dict[str, List[int]]:
    n_test = int(round(count * test_frac))
    n_val = int(round(count * val_frac))
    n_train = count - n_val - n_test
    return {
        "train": [0, n_train],
        "val": [n_train, n_train + n_val],
        "test": [n_train + n_val, count],
    }


def write_dataset(
    scenes: Sequence[Scene],
    dir_path,
    categories: Sequence[str] = DEFAULT_CATEGORIES,
    splits: Optional[Dict[str, List[int]]] = None,
    config: Optional[dict] = None,
) -> dict:
    """Write PNG images plus ``annotations.json``; returns the manifest summary."""
    root = Path(dir_path)
    image_dir = root / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {image_dir}: {exc}") from exc

    image_size = scenes[0].image_size if scenes else (config or {}).get("image_size", 0)
    scene_entries, instance_entries = [], []
    for scene in scenes:
        fname = f"images/scene_{scene.scene_id:06d}.png"
        pixels = np.round(scene.image * 255.0).astype(np.uint8)
        try:
            Image.fromarray(pixels, mode="RGB").save(root / fname, format="PNG")
        except OSError as exc:
            raise DatasetError(f"cannot write {root / fname}: {exc}") from exc
        scene_entries.append({"scene_id": scene.scene_id, "file_name": fname,
                              "seed_used": str(scene.seed_used)})
        for inst in scene.instances:
            instance_entries.append({
                "scene_id": scene.scene_id,
                "instance_id": inst.instance_id,
                "category_id": inst.category_id,
                "bbox": [int(v) for v in inst.bbox],
                "depth_rank": inst.depth_rank,
                "amodal_rle": rle.encode(inst.amodal_mask),
                "visible_rle": rle.encode(inst.visible_mask),
                "occluding_rle": rle.encode(inst.occluding_mask),
            })
    if splits is None:
        ids = [s.scene_id for s in scenes]
        splits = {"all": [min(ids), max(ids) + 1] if ids else [0, 0]}
    manifest = {
        "version": SCHEMA_VERSION,
        "image_size": int(image_size),
        "categories": list(categories),
        "splits": splits,
        "config": config or {},
        "num_scenes": len(scene_entries),
        "num_instances": len(instance_entries),
        "scenes": scene_entries,
        "instances": instance_entries,
    }
    path = root / "annotations.json"
    try:
        path.write_text(json.dumps(manifest, separators=(",", ":")))
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    logger.info("wrote %d scenes / %d instances to %s", len(scene_entries), len(instance_entries), root)
    return {k: manifest[k] for k in ("version", "num_scenes", "num_instances", "splits")}


def read_manifest(dir_path) -> dict:
    path = Path(dir_path) / "annotations.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if manifest.get("version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: schema version {manifest.get('version')!r}, "
                           f"expected {SCHEMA_VERSION!r}")
    return manifest


def read_dataset(dir_path, split: Optional[str] = None) -> List[Scene]:
    root = Path(dir_path)
    manifest = read_manifest(root)
    size = int(manifest["image_size"])
    shape = (size, size)
    by_scene: Dict[int, List[InstanceRecord]] = {}
    for entry in manifest["instances"]:
        try:
            inst = InstanceRecord(
                instance_id=int(entry["instance_id"]),
                category_id=int(entry["category_id"]),
                amodal_mask=rle.decode(entry["amodal_rle"], shape),
                visible_mask=rle.decode(entry["visible_rle"], shape),
                occluding_mask=rle.decode(entry["occluding_rle"], shape),
                bbox=tuple(int(v) for v in entry["bbox"]),
                depth_rank=int(entry["depth_rank"]),
            )
        except rle.RLEError as exc:
            raise DatasetError(f"scene {entry.get('scene_id')} instance "
                               f"{entry.get('instance_id')}: RLE decode failed: {exc}") from exc
        try:
            validate_instance(inst, size)
        except SceneError as exc:
            raise DatasetError(f"scene {entry['scene_id']}: {exc}") from exc
        if not 0 <= inst.category_id < len(manifest["categories"]):
            raise DatasetError(f"instance {inst.instance_id}: category_id out of range")
        by_scene.setdefault(int(entry["scene_id"]), []).append(inst)

    lo, hi = None, None
    if split is not None:
        if split not in manifest["splits"]:
            raise DatasetError(f"{root}: unknown split {split!r}; have {sorted(manifest['splits'])}")
        lo, hi = manifest["splits"][split]
    scenes = []
    for entry in manifest["scenes"]:
        sid = int(entry["scene_id"])
        if lo is not None and not lo <= sid < hi:
            continue
        path = root / entry["file_name"]
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise DatasetError(f"cannot read {path}: {exc}") from exc
        if pixels.shape[:2] != shape:
            raise DatasetError(f"{path}: image shape {pixels.shape[:2]} != {shape}")
        scenes.append(Scene(
            scene_id=sid,
            image=pixels.astype(np.float32) / np.float32(255.0),
            instances=sorted(by_scene.get(sid, []), key=lambda r: r.instance_id),
            seed_used=int(entry["seed_used"]),
        ))
    return scenes


def dataset_categories(dir_path) -> List[str]:
    return list(read_manifest(dir_path)["categories"])
