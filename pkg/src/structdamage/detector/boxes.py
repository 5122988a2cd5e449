"""Box arithmetic: IoU, greedy NMS, delta coding, smooth L1 and anchors.

Boxes are ``(x1, y1, x2, y2)`` in pixels with continuous coordinates, so a
box's area is ``(x2 - x1) * (y2 - y1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

BBOX_CLIP = math.log(1000.0 / 16)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, shape (len(a), len(b))."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def nms(boxes, scores, iou_threshold: float) -> torch.Tensor:
    """Greedy suppression in descending score order, ties to the lower index.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``.  Returns kept indices in selection order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    scores = torch.as_tensor(scores, dtype=torch.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.sort(scores, descending=True, stable=True).indices.numpy()
    iou = box_iou(boxes, boxes).numpy()
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return torch.as_tensor(keep, dtype=torch.long)


def batched_nms(boxes, scores, labels, iou_threshold: float) -> torch.Tensor:
    """NMS applied independently per label; result sorted by score."""
    keep = []
    for lab in torch.unique(labels):
        idx = (labels == lab).nonzero(as_tuple=True)[0]
        keep.append(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    if not keep:
        return torch.zeros(0, dtype=torch.long)
    keep = torch.cat(keep)
    return keep[torch.sort(scores[keep], descending=True, stable=True).indices]


def encode(proposals: torch.Tensor, gt: torch.Tensor, stds=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    d = torch.stack([(gx - px) / pw, (gy - py) / ph, torch.log(gw / pw), torch.log(gh / ph)], dim=1)
    return d / d.new_tensor(stds)


def decode(proposals: torch.Tensor, deltas: torch.Tensor, stds=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    d = deltas * deltas.new_tensor(stds)
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    dw = d[:, 2].clamp(max=BBOX_CLIP)
    dh = d[:, 3].clamp(max=BBOX_CLIP)
    cx = px + d[:, 0] * pw
    cy = py + d[:, 1] * ph
    w = pw * torch.exp(dw)
    h = ph * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, width: float, height: float) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def smooth_l1(pred, target, beta: float = 1.0):
    """Sum over coordinates of 0.5 d^2 / beta for |d| < beta, else |d| - 0.5 beta."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = (pred - target).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).sum()


# ---------------------------------------------------------------------------
# Anchors


@dataclass(frozen=True)
class AnchorSet:
    """Anchors for every pyramid level, ordered level, row, column, shape."""
    strides: tuple[int, ...]
    grid_sizes: tuple[tuple[int, int], ...]
    per_level: tuple[torch.Tensor, ...]
    num_per_location: int

    @property
    def all(self) -> torch.Tensor:
        return torch.cat(self.per_level)


def base_anchors(stride: int, scales: Sequence[float], ratios: Sequence[float]) -> torch.Tensor:
    """Zero-centred anchor shapes, ratio-major (ratio = height / width)."""
    out = []
    for r in ratios:
        for s in scales:
            size = stride * s
            w = size / math.sqrt(r)
            h = size * math.sqrt(r)
            out.append([-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h])
    return torch.tensor(out, dtype=torch.float32)


def make_anchors(grid_sizes: Sequence[tuple[int, int]], strides: Sequence[int],
                 scales: Sequence[float] = (4.0, 4.0 * 2 ** (1 / 3), 4.0 * 2 ** (2 / 3)),
                 ratios: Sequence[float] = (0.5, 1.0, 2.0)) -> AnchorSet:
    """Tile base anchors over each level; anchor centres sit on cell centres."""
    levels = []
    for (gh, gw), s in zip(grid_sizes, strides):
        base = base_anchors(s, scales, ratios)
        ys = (torch.arange(gh, dtype=torch.float32) + 0.5) * s
        xs = (torch.arange(gw, dtype=torch.float32) + 0.5) * s
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
        levels.append((shifts + base[None]).reshape(-1, 4))
    return AnchorSet(tuple(strides), tuple(tuple(g) for g in grid_sizes), tuple(levels),
                     len(scales) * len(ratios))
