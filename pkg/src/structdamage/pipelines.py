"""Inference flows: classify-then-segment gating, end-to-end detection, overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .classifier import INPUT_SIZE, ClassifierModel, ClassPrediction, classify
from .dataset_io import resize_image
from .detector.model import Detection, MaskRCNN, detect
from .segmenter import UNetModel, binarize, segment

SEGMENTER_SIZE = 256
DUMP_FORMAT = "structdamage-detections/1"


@dataclass
class CascadeResult:
    classifier_verdict: ClassPrediction
    gated: bool
    masks: dict[str, np.ndarray] | None = None  # category -> bool (H, W) at input resolution

    def __post_init__(self):
        if self.gated != (self.masks is not None):
            raise ValueError("masks must be present exactly when the segmenter ran")


@dataclass(frozen=True)
class OverlayPalette:
    box_color: tuple[int, int, int]
    crack_color: tuple[int, int, int]
    spalling_color: tuple[int, int, int]
    background_color: tuple[int, int, int]

    def __post_init__(self):
        colors = [self.box_color, self.crack_color, self.spalling_color, self.background_color]
        for c in colors:
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ValueError(f"not an 8-bit RGB triple: {c}")
        if len(set(map(tuple, colors))) != 4:
            raise ValueError("palette colors must be pairwise distinct")

    def color(self, category: str) -> tuple[int, int, int]:
        return {"crack": self.crack_color, "spalling": self.spalling_color}[category]


PALETTES = {
    # Annotation figures: yellow cracks, green spalling, purple background.
    "labels": OverlayPalette((255, 255, 255), (255, 255, 0), (0, 255, 0), (128, 0, 128)),
    # Detector figures: green boxes, yellow cracks, purple spalling.
    "detections": OverlayPalette((0, 255, 0), (255, 255, 0), (128, 0, 128), (0, 0, 0)),
    # Cascade figures: red cracks, white spalling, black prediction background.
    "cascade": OverlayPalette((0, 255, 0), (255, 0, 0), (255, 255, 255), (0, 0, 0)),
}


def _gate_verdict(clf, img: np.ndarray) -> ClassPrediction:
    if isinstance(clf, ClassPrediction):
        return clf
    if isinstance(clf, ClassifierModel):
        return classify(clf, img)
    out = clf(img)
    return out if isinstance(out, ClassPrediction) else ClassPrediction(out)


def _segment_probs(seg, img: np.ndarray) -> np.ndarray:
    return segment(seg, img) if isinstance(seg, UNetModel) else np.asarray(seg(img), dtype=np.float64)


def cascaded_infer(img: np.ndarray, clf: ClassifierModel | Callable, seg: UNetModel | Callable,
                   damage_class_ids: Iterable[int], categories: Sequence[str] = ("crack",),
                   threshold: float = 0.5) -> CascadeResult:
    """Gate ``img`` with the classifier, then segment only if it looks damaged.

    ``clf`` may be a model, a callable (image -> probabilities) or a fixed
    :class:`ClassPrediction` (an oracle verdict); ``seg`` a model or a
    callable (image -> probability map).  The classifier sees a 224x224
    copy and the segmenter a 256x256 copy; masks are mapped back to the
    input resolution.
    """
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    verdict = _gate_verdict(clf, resize_image(arr, (INPUT_SIZE, INPUT_SIZE)))
    if verdict.argmax not in set(damage_class_ids):
        return CascadeResult(verdict, False)
    probs = _segment_probs(seg, resize_image(arr, (SEGMENTER_SIZE, SEGMENTER_SIZE)))
    if probs.ndim == 2:
        probs = probs[None]
    if len(probs) != len(categories):
        raise ValueError(f"segmenter emits {len(probs)} channels for {len(categories)} categories")
    masks = {}
    for cat, p in zip(categories, probs):
        if p.shape != (h, w):
            p = resize_image(p, (w, h))
        masks[cat] = binarize(p, threshold)
    return CascadeResult(verdict, True, masks)


def segment_only(img: np.ndarray, seg: UNetModel | Callable, categories: Sequence[str] = ("crack",),
                 threshold: float = 0.5) -> dict[str, np.ndarray]:
    """The segmenter path of :func:`cascaded_infer` with the gate always open."""
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    probs = _segment_probs(seg, resize_image(arr, (SEGMENTER_SIZE, SEGMENTER_SIZE)))
    if probs.ndim == 2:
        probs = probs[None]
    return {c: binarize(p if p.shape == (h, w) else resize_image(p, (w, h)), threshold)
            for c, p in zip(categories, probs)}


@dataclass
class DetectionResult:
    image_id: int | None
    detections: list[Detection] = field(default_factory=list)
    gated: bool | None = None

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id}
        if self.gated is not None:
            d["gated"] = self.gated
        d["detections"] = [det.to_dict() for det in self.detections]
        return d


def end_to_end_infer(img, det: MaskRCNN, threshold: float = 0.5, image_ids: Sequence[int] | None = None):
    """Delegate to :func:`detect`.

    A single raster returns its detection list; a list of rasters returns a
    list of :class:`DetectionResult` in input order.
    """
    if isinstance(img, np.ndarray) and img.ndim in (2, 3) and img.dtype != object:
        return detect(det, img, threshold)
    imgs = list(img)
    ids = list(image_ids) if image_ids is not None else list(range(len(imgs)))
    if len(ids) != len(imgs):
        raise ValueError("image_ids and images differ in length")
    return [DetectionResult(i, detect(det, x, threshold)) for i, x in zip(ids, imgs)]


def cascade_to_result(image_id: int, res: CascadeResult) -> DetectionResult:
    """Express a cascade outcome as mask-only detections (score = gate confidence)."""
    dets = []
    if res.gated:
        score = float(res.classifier_verdict.probabilities[res.classifier_verdict.argmax])
        for cat, m in res.masks.items():
            if m.any():
                ys, xs = np.nonzero(m)
                box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
                dets.append(Detection(cat, score, box, m))
    return DetectionResult(image_id, dets, res.gated)


def dump_results(results: Sequence[DetectionResult], method: str | None = None) -> bytes:
    """Serialize per-image detections; ``method`` names the producing pipeline."""
    doc = {"format": DUMP_FORMAT, "images": [r.to_dict() for r in results]}
    if method is not None:
        doc["method"] = method
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def load_results(data: bytes | str) -> list[DetectionResult]:
    doc = json.loads(data)
    if doc.get("format") != DUMP_FORMAT:
        raise ValueError(f"unsupported dump format {doc.get('format')!r}")
    return [DetectionResult(e["image_id"], [Detection.from_dict(d) for d in e["detections"]], e.get("gated"))
            for e in doc["images"]]


# ---------------------------------------------------------------------------
# Overlays


def _stroke_box(out: np.ndarray, box, color, width: int = 2):
    h, w = out.shape[:2]
    x1, y1, x2, y2 = box
    c0, c1 = int(np.clip(np.floor(x1), 0, w - 1)), int(np.clip(np.ceil(x2) - 1, 0, w - 1))
    r0, r1 = int(np.clip(np.floor(y1), 0, h - 1)), int(np.clip(np.ceil(y2) - 1, 0, h - 1))
    out[r0:min(r0 + width, r1 + 1), c0:c1 + 1] = color
    out[max(r1 - width + 1, r0):r1 + 1, c0:c1 + 1] = color
    out[r0:r1 + 1, c0:min(c0 + width, c1 + 1)] = color
    out[r0:r1 + 1, max(c1 - width + 1, c0):c1 + 1] = color


def _layers(result) -> tuple[list[tuple[str, np.ndarray]], list]:
    if isinstance(result, CascadeResult):
        return list((result.masks or {}).items()), []
    if isinstance(result, DetectionResult):
        result = result.detections
    dets = list(result)
    return [(d.category, d.mask) for d in dets], [d.box for d in dets]


def render_overlay(img: np.ndarray, result, palette: OverlayPalette | str = "detections",
                   alpha: float = 0.5, panels: bool = False) -> np.ndarray:
    """Blend masks in category colors and stroke detection boxes.

    Only pixels under a mask (or a box outline) change.  With ``panels`` the
    output is original | predicted (masks on the background color) | overlay.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if isinstance(palette, str):
        palette = PALETTES[palette]
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    h, w = arr.shape[:2]
    layers, boxes = _layers(result)
    for cat, m in layers:
        if m.shape != (h, w):
            raise ValueError(f"mask shape {m.shape} does not match image {(h, w)}")
    out = arr.copy()
    pred = np.empty_like(arr)
    pred[...] = palette.background_color
    for cat, m in layers:
        color = np.asarray(palette.color(cat), dtype=np.float64)
        blended = (1 - alpha) * out[m].astype(np.float64) + alpha * color
        out[m] = np.clip(np.rint(blended), 0, 255).astype(arr.dtype)
        pred[m] = palette.color(cat)
    for b in boxes:
        _stroke_box(out, b, palette.box_color)
    if panels:
        return np.concatenate([arr, pred, out], axis=1)
    return out


def palette_from(spec: str | Mapping) -> OverlayPalette:
    if isinstance(spec, str):
        if spec not in PALETTES:
            raise ValueError(f"unknown palette {spec!r}; choose from {sorted(PALETTES)}")
        return PALETTES[spec]
    return OverlayPalette(**{k: tuple(v) for k, v in spec.items()})
