"""Training-time augmentation that keeps polygon annotations consistent."""
from __future__ import annotations

import warnings

import numpy as np

from ..dataset_io import ImageRecord, PolygonAnnotation, rasterize_polygon, resize_image


def hflip(rec: ImageRecord) -> ImageRecord:
    """Mirror left-right.

    Applying it twice restores the record bit-for-bit when vertices lie on a
    dyadic grid (as generated data does); otherwise to within one ulp of the
    image width.
    """
    pixels = None if rec.pixels is None else rec.pixels[:, ::-1].copy()
    anns = []
    for a in rec.annotations:
        v = a.vertices.copy()
        v[:, 0] = rec.width - v[:, 0]
        anns.append(PolygonAnnotation(a.category, v))
    return ImageRecord(rec.id, rec.width, rec.height, pixels, anns, dict(rec.task_labels),
                       rec.scene_level, rec.file_name)


def adjust_brightness(rec: ImageRecord, factor: float) -> ImageRecord:
    pixels = np.clip(np.rint(rec.pixels.astype(np.float64) * factor), 0, 255).astype(np.uint8)
    return ImageRecord(rec.id, rec.width, rec.height, pixels, list(rec.annotations),
                       dict(rec.task_labels), rec.scene_level, rec.file_name)


def clip_polygon(vertices: np.ndarray, width: float, height: float) -> np.ndarray:
    """Sutherland-Hodgman clip against the image rectangle."""
    def clip(poly, inside, cross):
        out = []
        for i in range(len(poly)):
            cur, prev = poly[i], poly[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
        return out

    def at_x(x0):
        return lambda p, q: np.array([x0, p[1] + (q[1] - p[1]) * (x0 - p[0]) / (q[0] - p[0])])

    def at_y(y0):
        return lambda p, q: np.array([p[0] + (q[0] - p[0]) * (y0 - p[1]) / (q[1] - p[1]), y0])

    poly = [np.asarray(v, dtype=np.float64) for v in vertices]
    for inside, cross in ((lambda p: p[0] >= 0, at_x(0.0)), (lambda p: p[0] <= width, at_x(width)),
                          (lambda p: p[1] >= 0, at_y(0.0)), (lambda p: p[1] <= height, at_y(height))):
        if not poly:
            break
        poly = clip(poly, inside, cross)
    return np.array(poly).reshape(-1, 2)


def scale_jitter(rec: ImageRecord, factor: float) -> ImageRecord:
    """Zoom about the image centre, keeping the canvas size.

    Annotations leaving the canvas are clipped and dropped when nothing
    rasterizable remains.
    """
    w, h = rec.width, rec.height
    sw, sh = max(1, round(w * factor)), max(1, round(h * factor))
    scaled = resize_image(rec.pixels, (sw, sh))
    ox, oy = (sw - w) // 2, (sh - h) // 2
    canvas = np.zeros_like(rec.pixels)
    canvas[...] = rec.pixels.reshape(-1, rec.pixels.shape[-1]).mean(0).astype(rec.pixels.dtype)
    src_x0, src_y0 = max(ox, 0), max(oy, 0)
    dst_x0, dst_y0 = max(-ox, 0), max(-oy, 0)
    cw, ch = min(sw - src_x0, w - dst_x0), min(sh - src_y0, h - dst_y0)
    canvas[dst_y0:dst_y0 + ch, dst_x0:dst_x0 + cw] = scaled[src_y0:src_y0 + ch, src_x0:src_x0 + cw]
    anns = []
    for a in rec.annotations:
        v = a.vertices * [sw / w, sh / h] - [ox, oy]
        v = clip_polygon(v, w, h)
        if len(v) < 3:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if not rasterize_polygon(v, w, h).any():
                continue
        anns.append(PolygonAnnotation(a.category, v))
    return ImageRecord(rec.id, w, h, canvas, anns, dict(rec.task_labels), rec.scene_level, rec.file_name)


def augment(rec: ImageRecord, rng: np.random.Generator, flip_prob: float = 0.5,
            brightness: tuple[float, float] = (0.8, 1.2),
            scale: tuple[float, float] = (0.9, 1.1)) -> ImageRecord:
    if rng.random() < flip_prob:
        rec = hflip(rec)
    rec = adjust_brightness(rec, rng.uniform(*brightness))
    return scale_jitter(rec, rng.uniform(*scale))
