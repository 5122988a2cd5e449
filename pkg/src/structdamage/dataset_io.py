"""Annotated image datasets: COCO-style JSON I/O, polygon rasterization,
resizing, splitting and a synthetic damage generator.

Images are ``uint8`` arrays of shape (H, W, 3); masks are ``bool`` arrays of
shape (H, W).  Polygon vertices are sub-pixel (x, y) pairs in image pixel
coordinates, so the pixel with row ``i`` and column ``j`` has its center at
``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

CATEGORIES = {1: "crack", 2: "spalling"}
CATEGORY_IDS = {name: cid for cid, name in CATEGORIES.items()}
SCENE_LEVELS = ("pixel", "object", "structural")


class AnnotationError(ValueError):
    """Malformed annotation document.  ``path`` locates the offending node."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class SchemaError(AnnotationError):
    """Well-formed document that violates the dataset schema."""


class DegeneratePolygonWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TaskSchema:
    task_id: int
    name: str
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# Class names follow the phi-Net task descriptions; counts follow the task table.
TASKS = {
    1: TaskSchema(1, "Scene classification", ("pixel", "object", "structural")),
    2: TaskSchema(2, "Damage check", ("damaged", "undamaged")),
    3: TaskSchema(3, "Spalling condition", ("spalling", "non-spalling")),
    4: TaskSchema(4, "Material type", ("steel", "other")),
    5: TaskSchema(5, "Collapse check", ("non-collapse", "partial collapse", "global collapse")),
    6: TaskSchema(6, "Component type", ("beam", "column", "wall", "other")),
    7: TaskSchema(7, "Damage level", ("undamaged", "minor", "moderate", "heavy")),
    8: TaskSchema(8, "Damage type", ("no damage", "flexural", "shear", "combined")),
}


def task_schema(task_id: int, class_names: Sequence[str] | None = None) -> TaskSchema:
    """Schema for ``task_id``; ``class_names`` overrides the default names."""
    if task_id not in TASKS:
        raise ValueError(f"task id must be in 1..8, got {task_id}")
    base = TASKS[task_id]
    if class_names is None:
        return base
    if len(class_names) != base.num_classes:
        raise ValueError(
            f"task {task_id} has {base.num_classes} classes, got {len(class_names)} names")
    return TaskSchema(task_id, base.name, tuple(class_names))


@dataclass
class PolygonAnnotation:
    category: str
    vertices: np.ndarray  # (K, 2) float64, implicitly closed

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if self.category not in CATEGORY_IDS:
            raise SchemaError("category", f"unknown category {self.category!r}")
        if len(self.vertices) < 3:
            raise SchemaError("vertices", "a polygon needs at least 3 vertices")

    def bbox(self) -> tuple[float, float, float, float]:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return float(x.min()), float(y.min()), float(x.max()), float(y.max())

    def __eq__(self, other):
        if not isinstance(other, PolygonAnnotation):
            return NotImplemented
        return self.category == other.category and np.array_equal(self.vertices, other.vertices)


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    pixels: np.ndarray | None = None
    annotations: list[PolygonAnnotation] = field(default_factory=list)
    task_labels: dict[int, int] = field(default_factory=dict)
    scene_level: str | None = None
    file_name: str | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SchemaError(f"image {self.id}", "width and height must be >= 1")
        if self.file_name is None:
            self.file_name = f"{self.id:06d}.png"
        if self.pixels is not None and self.pixels.shape[:2] != (self.height, self.width):
            raise SchemaError(f"image {self.id}", "pixel array does not match width/height")
        if self.scene_level is not None and self.scene_level not in SCENE_LEVELS:
            raise SchemaError(f"image {self.id}", f"unknown scene level {self.scene_level!r}")
        if self.scene_level is not None and 1 in self.task_labels:
            if SCENE_LEVELS[self.task_labels[1]] != self.scene_level:
                raise SchemaError(f"image {self.id}", "scene_level disagrees with task1 label")

    @property
    def has_damage(self) -> bool:
        return bool(self.annotations)

    def masks(self, category: str | None = None) -> list[np.ndarray]:
        """One rasterized mask per annotation (optionally of one category)."""
        return [rasterize_polygon(a, self.width, self.height) for a in self.annotations
                if category is None or a.category == category]

    def category_mask(self, category: str) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        for m in self.masks(category):
            out |= m
        return out

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        same_pixels = (self.pixels is None and other.pixels is None) or (
            self.pixels is not None and other.pixels is not None
            and np.array_equal(self.pixels, other.pixels))
        return (self.id == other.id and self.width == other.width and self.height == other.height
                and self.file_name == other.file_name and self.scene_level == other.scene_level
                and self.task_labels == other.task_labels and self.annotations == other.annotations
                and same_pixels)


@dataclass
class LabeledDataset:
    records: list[ImageRecord] = field(default_factory=list)
    categories: dict[int, str] = field(default_factory=lambda: dict(CATEGORIES))
    provenance: str = ""

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise SchemaError("images", "image ids are not unique")
        names = set(self.categories.values())
        for r in self.records:
            for a in r.annotations:
                if a.category not in names:
                    raise SchemaError(f"image {r.id}", f"category {a.category!r} not in table")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def concat_datasets(*parts: LabeledDataset) -> LabeledDataset:
    """Join datasets in order, renumbering image ids 1..N (file names follow the new ids)."""
    records = []
    for ds in parts:
        for rec in ds.records:
            n = len(records) + 1
            records.append(replace(rec, id=n, file_name=None))
    return LabeledDataset(records, dict(CATEGORIES), " + ".join(ds.provenance for ds in parts))


# ---------------------------------------------------------------------------
# JSON annotation files


def _expect(cond: bool, path: str, message: str):
    if not cond:
        raise AnnotationError(path, message)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def load_annotations(data: bytes | str, image_root: str | Path | None = None) -> LabeledDataset:
    """Parse a COCO-style annotation document.

    When ``image_root`` is given the referenced image files are read from it
    (relative paths) into ``ImageRecord.pixels``.
    """
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise AnnotationError("$", f"invalid JSON: {exc}") from None
    _expect(isinstance(doc, dict), "$", "top level must be an object")
    for key in ("images", "annotations", "categories"):
        _expect(isinstance(doc.get(key), list), f"$.{key}", "missing or not an array")

    categories = {}
    for i, c in enumerate(doc["categories"]):
        p = f"$.categories[{i}]"
        _expect(isinstance(c, dict), p, "must be an object")
        _expect(isinstance(c.get("id"), int), f"{p}.id", "must be an integer")
        _expect(isinstance(c.get("name"), str), f"{p}.name", "must be a string")
        if c["name"] not in CATEGORY_IDS:
            raise SchemaError(f"{p}.name", f"unknown category {c['name']!r}")
        categories[c["id"]] = c["name"]

    records: dict[int, ImageRecord] = {}
    for i, im in enumerate(doc["images"]):
        p = f"$.images[{i}]"
        _expect(isinstance(im, dict), p, "must be an object")
        for key in ("id", "width", "height"):
            _expect(isinstance(im.get(key), int) and not isinstance(im.get(key), bool),
                    f"{p}.{key}", "must be an integer")
        _expect(isinstance(im.get("file_name"), str), f"{p}.file_name", "must be a string")
        if im["id"] in records:
            raise SchemaError(f"{p}.id", f"duplicate image id {im['id']}")
        labels = {}
        raw_labels = im.get("task_labels", {})
        _expect(isinstance(raw_labels, dict), f"{p}.task_labels", "must be an object")
        for key, value in raw_labels.items():
            lp = f"{p}.task_labels.{key}"
            _expect(key.startswith("task") and key[4:].isdigit(), lp, "keys must be task1..task8")
            tid = int(key[4:])
            if tid not in TASKS:
                raise SchemaError(lp, "task id out of range")
            _expect(isinstance(value, int) and not isinstance(value, bool), lp, "must be an integer")
            if not 0 <= value < TASKS[tid].num_classes:
                raise SchemaError(lp, f"class index {value} out of range")
            labels[tid] = value
        scene = im.get("scene_level")
        _expect(scene is None or isinstance(scene, str), f"{p}.scene_level", "must be a string")
        try:
            rec = ImageRecord(id=im["id"], width=im["width"], height=im["height"],
                              task_labels=labels, scene_level=scene, file_name=im["file_name"])
        except SchemaError as exc:
            raise SchemaError(p, str(exc)) from None
        records[rec.id] = rec

    for i, ann in enumerate(doc["annotations"]):
        p = f"$.annotations[{i}]"
        _expect(isinstance(ann, dict), p, "must be an object")
        for key in ("image_id", "category_id"):
            _expect(isinstance(ann.get(key), int), f"{p}.{key}", "must be an integer")
        if ann["image_id"] not in records:
            raise SchemaError(f"{p}.image_id", f"no image with id {ann['image_id']}")
        if ann["category_id"] not in categories:
            raise SchemaError(f"{p}.category_id", f"no category with id {ann['category_id']}")
        seg = ann.get("segmentation")
        _expect(isinstance(seg, list), f"{p}.segmentation", "must be a list of polygons")
        rec = records[ann["image_id"]]
        for k, flat in enumerate(seg):
            sp = f"{p}.segmentation[{k}]"
            _expect(isinstance(flat, list) and all(_is_number(v) for v in flat), sp,
                    "must be a flat list of numbers")
            _expect(len(flat) % 2 == 0 and len(flat) >= 6, sp, "needs an even count >= 6")
            verts = np.asarray(flat, dtype=np.float64).reshape(-1, 2)
            if (verts < 0).any() or (verts[:, 0] > rec.width).any() or (verts[:, 1] > rec.height).any():
                raise SchemaError(sp, "vertex outside the image")
            rec.annotations.append(PolygonAnnotation(categories[ann["category_id"]], verts))

    ds = LabeledDataset(list(records.values()), categories, provenance=str(doc.get("info", {}).get("description", "")))
    if image_root is not None:
        root = Path(image_root)
        for rec in ds.records:
            path = root / rec.file_name
            if not path.exists():
                raise FileNotFoundError(path)
            rec.pixels = read_image(path)
            if rec.pixels.shape[:2] != (rec.height, rec.width):
                raise SchemaError(f"image {rec.id}", f"{path} size differs from declared size")
    return ds


def _number(v: float):
    # Integral coordinates are written as ints so files stay compact; the value is unchanged.
    f = float(v)
    return int(f) if f.is_integer() and abs(f) < 2 ** 53 else f


def save_annotations(dataset: LabeledDataset) -> bytes:
    images, annotations = [], []
    ann_id = 1
    for rec in dataset.records:
        entry = {"id": rec.id, "file_name": rec.file_name, "width": rec.width, "height": rec.height}
        if rec.task_labels:
            entry["task_labels"] = {f"task{k}": v for k, v in sorted(rec.task_labels.items())}
        if rec.scene_level is not None:
            entry["scene_level"] = rec.scene_level
        images.append(entry)
        for a in rec.annotations:
            annotations.append({
                "id": ann_id,
                "image_id": rec.id,
                "category_id": CATEGORY_IDS[a.category],
                "segmentation": [[_number(v) for v in a.vertices.ravel()]],
            })
            ann_id += 1
    doc = {
        "info": {"description": dataset.provenance},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": name} for cid, name in sorted(dataset.categories.items())],
    }
    return json.dumps(doc, indent=1).encode("utf-8")


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: str | Path, pixels: np.ndarray):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def write_dataset(dataset: LabeledDataset, directory: str | Path,
                  name: str = "annotations.json") -> Path:
    """Write PNG images plus the annotation file into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        if rec.pixels is not None:
            write_image(directory / rec.file_name, rec.pixels)
    out = directory / name
    out.write_bytes(save_annotations(dataset))
    return out


def read_dataset(path: str | Path, load_pixels: bool = True) -> LabeledDataset:
    path = Path(path)
    return load_annotations(path.read_bytes(), path.parent if load_pixels else None)


# ---------------------------------------------------------------------------
# Rasterization


def _is_degenerate(v: np.ndarray, eps: float = 1e-12) -> bool:
    d = v - v[0]
    norms = np.hypot(d[:, 0], d[:, 1])
    if norms.max() <= eps:
        return True
    ref = d[np.argmax(norms)]
    cross = ref[0] * d[:, 1] - ref[1] * d[:, 0]
    return bool(np.all(np.abs(cross) <= eps * max(1.0, norms.max() ** 2)))


def rasterize_polygon(poly: PolygonAnnotation | np.ndarray, width: int, height: int) -> np.ndarray:
    """Fill a closed polygon with the even-odd rule sampled at pixel centers.

    Self-intersecting outlines are allowed; overlapping lobes cancel by parity.
    A degenerate (collinear) outline yields an empty mask and a
    :class:`DegeneratePolygonWarning`.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    verts = poly.vertices if isinstance(poly, PolygonAnnotation) else np.asarray(poly, float).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(verts) < 3 or _is_degenerate(verts):
        warnings.warn("degenerate polygon rasterized to an empty mask", DegeneratePolygonWarning,
                      stacklevel=2)
        return mask

    cy = np.arange(height) + 0.5
    cx = np.arange(width) + 0.5
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        rows = np.nonzero((cy >= min(ay, by)) & (cy < max(ay, by)))[0]
        # Half-open in y so a vertex shared by two edges is counted once.
        rows = rows[(ay > cy[rows]) != (by > cy[rows])]
        if rows.size == 0:
            continue
        xc = ax + (cy[rows] - ay) * (bx - ax) / (by - ay)
        # Pixel centers strictly left of the crossing flip parity.
        first = np.searchsorted(cx, xc, side="left")
        for r, f in zip(rows, first):
            mask[r, :f] ^= True
    return mask


def polygons_to_mask(polys: Iterable[PolygonAnnotation], width: int, height: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    for p in polys:
        out |= rasterize_polygon(p, width, height)
    return out


# ---------------------------------------------------------------------------
# Resizing


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_image(img: np.ndarray, target: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Bilinear resize to ``target = (width, height)`` with half-pixel centers.

    Source coordinates are clamped to the image, so borders replicate.  The
    output dtype matches the input; integer images are rounded.
    """
    if method != "bilinear":
        raise ValueError(f"unsupported resize method {method!r}")
    w_out, h_out = int(target[0]), int(target[1])
    if w_out < 1 or h_out < 1:
        raise ValueError("target dimensions must be >= 1")
    arr = np.asarray(img)
    h_in, w_in = arr.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return arr.copy()
    data = arr.astype(np.float64)
    ylo, yhi, fy = _axis_weights(h_in, h_out)
    xlo, xhi, fx = _axis_weights(w_in, w_out)
    fy = fy.reshape(-1, 1, *([1] * (arr.ndim - 2)))
    fx = fx.reshape(1, -1, *([1] * (arr.ndim - 2)))
    top = data[ylo][:, xlo] * (1 - fx) + data[ylo][:, xhi] * fx
    bottom = data[yhi][:, xlo] * (1 - fx) + data[yhi][:, xhi] * fx
    out = top * (1 - fy) + bottom * fy
    if np.issubdtype(arr.dtype, np.integer):
        info = np.iinfo(arr.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(arr.dtype)
    if arr.dtype == bool:
        return out >= 0.5
    return out.astype(arr.dtype)


def resize_record(rec: ImageRecord, target: tuple[int, int]) -> ImageRecord:
    """Resize an image record, scaling its polygons with it."""
    w, h = target
    sx, sy = w / rec.width, h / rec.height
    anns = [PolygonAnnotation(a.category, a.vertices * [sx, sy]) for a in rec.annotations]
    pixels = None if rec.pixels is None else resize_image(rec.pixels, target)
    return ImageRecord(rec.id, w, h, pixels, anns, dict(rec.task_labels), rec.scene_level, rec.file_name)


# ---------------------------------------------------------------------------
# Splitting


def split_dataset(ds: LabeledDataset, ratios: Sequence[float] = (0.64, 0.16, 0.20),
                  seed: int = 0) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded train/val/test partition.

    Validation and test sizes are ``floor(n * ratio)``; the remainder goes to
    training.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(ds)
    if all(r > 0 for r in ratios) and n < 3:
        raise ValueError(f"cannot split {n} records three ways")
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(
        LabeledDataset([ds.records[i] for i in sorted(idx)], dict(ds.categories),
                       f"{ds.provenance}[{name}]")
        for idx, name in zip(parts, ("train", "val", "test")))


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    ``crack_density`` and ``spall_density`` are instances per image: the
    integer part is always drawn, the fractional part is the probability of
    one more.
    """
    count: int = 10
    image_size: int | tuple[int, int] = 128
    crack_density: float = 1.0
    spall_density: float = 0.0
    crack_width: tuple[float, float] = (2.5, 4.5)
    spall_radius: tuple[float, float] = (0.12, 0.25)  # fraction of the short side


def _instances(rng: np.random.Generator, density: float) -> int:
    base = int(math.floor(density))
    return base + int(rng.random() < density - base)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(120, 190)
    tint = rng.uniform(-8, 8, size=3)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy = rng.uniform(-25, 25, size=2)
    shade = base + gx * (xx - 0.5) + gy * (yy - 0.5)
    coarse = rng.normal(0, 6, size=(h // 8 + 2, w // 8 + 2))
    coarse = resize_image(coarse, (w, h))
    noise = rng.normal(0, 5, size=(h, w))
    img = (shade + coarse + noise)[..., None] + tint
    return img


def _crack_polygon(rng: np.random.Generator, w: int, h: int, width_range) -> np.ndarray:
    n = int(rng.integers(4, 8))
    length = rng.uniform(0.45, 0.9) * min(w, h)
    start = rng.uniform([0.15 * w, 0.15 * h], [0.85 * w, 0.85 * h])
    heading = rng.uniform(0, 2 * np.pi)
    step = length / (n - 1)
    pts = [start]
    for _ in range(n - 1):
        heading += rng.normal(0, 0.35)
        pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
    pts = np.array(pts)
    half = rng.uniform(*width_range) / 2
    d = np.gradient(pts, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
    taper = np.linspace(0.6, 1.0, n) if rng.random() < 0.5 else np.linspace(1.0, 0.6, n)
    left = pts + normal * (half * taper)[:, None]
    right = pts - normal * (half * taper)[:, None]
    poly = np.concatenate([left, right[::-1]])
    poly[:, 0] = np.clip(poly[:, 0], 0, w)
    poly[:, 1] = np.clip(poly[:, 1], 0, h)
    return poly


def _spall_polygon(rng: np.random.Generator, w: int, h: int, radius_range) -> np.ndarray:
    short = min(w, h)
    rx = rng.uniform(*radius_range) * short
    ry = rx * rng.uniform(0.6, 1.4)
    cx = rng.uniform(rx, w - rx)
    cy = rng.uniform(min(ry, h / 2), max(h - ry, h / 2))
    k = 24
    theta = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    jag = 1.0 + rng.uniform(-0.12, 0.12, size=k)
    rot = rng.uniform(0, np.pi)
    px, py = rx * jag * np.cos(theta), ry * jag * np.sin(theta)
    x = cx + px * np.cos(rot) - py * np.sin(rot)
    y = cy + px * np.sin(rot) + py * np.cos(rot)
    return np.stack([np.clip(x, 0, w), np.clip(y, 0, h)], axis=1)


def _snap(verts: np.ndarray) -> np.ndarray:
    # 1/256 px grid: far below labeling precision, and keeps w - x exact.
    return np.round(verts * 256.0) / 256.0


def generate_synthetic(spec: SyntheticSpec | dict, seed: int = 0) -> LabeledDataset:
    """Concrete-like images with dark polyline cracks and rough spalling blobs.

    Ground truth is exact: damaged pixels are exactly the rasterized polygons.
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    if isinstance(spec.image_size, int):
        w = h = spec.image_size
    else:
        w, h = spec.image_size
    rng = np.random.default_rng(seed)
    records = []
    for idx in range(spec.count):
        img = _background(rng, h, w)
        anns = []
        for _ in range(_instances(rng, spec.spall_density)):
            verts = _snap(_spall_polygon(rng, w, h, spec.spall_radius))
            m = rasterize_polygon(verts, w, h)
            if not m.any():
                continue
            depth = rng.uniform(35, 60)
            rough = rng.normal(0, 14, size=(h, w))
            aggregate = (rng.random((h, w)) < 0.08) * rng.uniform(-30, 30)
            fill = img.mean(axis=2) - depth + rough + aggregate
            img[m] = (fill[m, None] + np.array([4.0, 0.0, -6.0]))
            anns.append(PolygonAnnotation("spalling", verts))
        for _ in range(_instances(rng, spec.crack_density)):
            verts = _snap(_crack_polygon(rng, w, h, spec.crack_width))
            m = rasterize_polygon(verts, w, h)
            if not m.any():
                continue
            img[m] = img[m] * rng.uniform(0.15, 0.3) + rng.normal(0, 3, size=(int(m.sum()), 1))
            anns.append(PolygonAnnotation("crack", verts))
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        has_spall = any(a.category == "spalling" for a in anns)
        labels = {
            1: 0,
            2: TASKS[2].class_names.index("damaged" if anns else "undamaged"),
            3: TASKS[3].class_names.index("spalling" if has_spall else "non-spalling"),
        }
        records.append(ImageRecord(idx + 1, w, h, pixels, anns, labels, "pixel"))
    return LabeledDataset(records, dict(CATEGORIES), f"synthetic(seed={seed}, {spec})")


# ---------------------------------------------------------------------------
# Mask encoding


def mask_to_rle(mask: np.ndarray) -> dict:
    """Uncompressed COCO run-length encoding (column-major, starts with zeros)."""
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for c in rle["counts"]:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    if pos != h * w:
        raise AnnotationError("mask.counts", f"runs cover {pos} pixels, expected {h * w}")
    return flat.reshape((h, w), order="F")
