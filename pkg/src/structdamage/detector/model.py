"""Mask R-CNN family: vanilla, APANet, HRNet-backboned and three cascade wirings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..dataset_io import CATEGORIES, resize_image
from ..nn_blocks import (BlockConfig, BottomUpAugmentation, FPN, HRNetStage, PyramidFeatures,
                         ResidualBlock, SpatialAttention, adaptive_feature_pooling, make_norm,
                         roi_align, seeded_init)
from .boxes import AnchorSet, batched_nms, clip_boxes, decode, make_anchors, nms

CATEGORY_NAMES = tuple(CATEGORIES[k] for k in sorted(CATEGORIES))
KINDS = ("vanilla", "apanet", "hrnet", "cascade_b", "cascade_c", "cascade_d")
CASCADE_KINDS = ("cascade_b", "cascade_c", "cascade_d")
# Which cascade stages own a mask branch.
MASK_STAGES = {"cascade_b": (0,), "cascade_c": (2,), "cascade_d": (0, 1, 2)}


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorVariant:
    kind: str = "apanet"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}; choose from {KINDS}")

    @property
    def stages(self) -> int:
        return 3 if self.kind in CASCADE_KINDS else 1

    @property
    def is_cascade(self) -> bool:
        return self.kind in CASCADE_KINDS


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture settings; defaults are a desk-scale model."""
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    hrnet_channels: tuple[int, int, int] = (16, 32, 64)
    fpn_channels: int = 32
    anchor_scales: tuple[float, ...] = (4.0, 4.0 * 2 ** (1 / 3), 4.0 * 2 ** (2 / 3))
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pre_nms_top_n: int = 1000
    rpn_post_nms_top_n_train: int = 256
    rpn_post_nms_top_n_test: int = 100
    rpn_nms_threshold: float = 0.7
    rpn_min_size: float = 1.0
    box_pool_size: int = 7
    mask_pool_size: int = 14
    fc_dim: int = 256
    canonical_scale: float = 224.0
    max_side: int = 1333
    size_divisor: int = 32
    nms_threshold: float = 0.5
    max_detections: int = 100
    mask_threshold: float = 0.5
    # None means "decided by the variant kind".
    path_augmentation: bool | None = None
    spatial_attention: bool | None = None
    attention_on: str = "n"  # "n", "p" or "both"
    fc_fusion: bool = False
    cascade_iou: tuple[float, ...] = (0.5, 0.6, 0.7)
    box_stds: tuple[tuple[float, ...], ...] = (
        (0.1, 0.1, 0.2, 0.2), (0.05, 0.05, 0.1, 0.1), (0.033, 0.033, 0.067, 0.067))
    stage_loss_weights: tuple[float, ...] = (1.0, 0.5, 0.25)

    @property
    def mask_size(self) -> int:
        return 2 * self.mask_pool_size


@dataclass
class Detection:
    category: str
    score: float
    box: tuple[float, float, float, float]
    mask: np.ndarray  # bool, image coordinates

    def to_dict(self) -> dict:
        from ..dataset_io import mask_to_rle
        return {"category": self.category, "score": round(float(self.score), 6),
                "box": [round(float(v), 4) for v in self.box], "mask": mask_to_rle(self.mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        from ..dataset_io import rle_to_mask
        return cls(d["category"], float(d["score"]), tuple(float(v) for v in d["box"]),
                   rle_to_mask(d["mask"]))


# ---------------------------------------------------------------------------
# Backbones


class ResNetFeatures(nn.Module):
    """Residual stack emitting features at strides 4, 8, 16, 32."""

    strides = (4, 8, 16, 32)

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c0 = channels[0]
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, 2, 1, bias=False),
                                  ResidualBlock(BlockConfig(c0, c0, 2)))
        self.stages = nn.ModuleList()
        cin = c0
        for i, c in enumerate(channels):
            stride = 1 if i == 0 else 2
            self.stages.append(nn.Sequential(ResidualBlock(BlockConfig(cin, c, stride)),
                                             ResidualBlock(BlockConfig(c, c))))
            cin = c
        # Pre-activation blocks leave the residual stream unnormalized; tap it through norm + ReLU.
        self.taps = nn.ModuleList(nn.Sequential(make_norm("group", c), nn.ReLU()) for c in channels)
        self.out_channels = list(channels)

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for stage, tap in zip(self.stages, self.taps):
            x = stage(x)
            outs.append(tap(x))
        return outs


class HRNetBackbone(nn.Module):
    """Three-branch high-resolution backbone plus a stride-32 tap for the pyramid."""

    strides = (4, 8, 16, 32)

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c0, c1, c2 = channels
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, 2, 1, bias=False), nn.ReLU(),
                                  nn.Conv2d(c0, c0, 3, 2, 1, bias=False), nn.ReLU())
        self.stage2 = HRNetStage([c0], new_branch=c1)
        self.stage3 = HRNetStage([c0, c1], new_branch=c2)
        self.stage4 = HRNetStage([c0, c1, c2])
        self.extra = nn.Conv2d(c2, c2, 3, 2, 1)
        self.out_channels = [c0, c1, c2, c2]
        self.taps = nn.ModuleList(nn.Sequential(make_norm("group", c), nn.ReLU()) for c in self.out_channels)

    def branches(self, x) -> list[torch.Tensor]:
        return self.stage4(self.stage3(self.stage2([self.stem(x)])))

    def forward(self, x):
        b = self.branches(x)
        return [tap(f) for tap, f in zip(self.taps, b + [self.extra(b[-1])])]


# ---------------------------------------------------------------------------
# Heads


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)

    def forward(self, levels: Sequence[torch.Tensor]):
        """Flattened objectness logits (A,) and deltas (A, 4), anchor order."""
        logits, deltas = [], []
        for f in levels:
            t = F.relu(self.conv(f))
            logits.append(self.cls(t)[0].permute(1, 2, 0).reshape(-1))
            deltas.append(self.reg(t)[0].permute(1, 2, 0).reshape(-1, 4))
        return torch.cat(logits), torch.cat(deltas)


class BoxHead(nn.Module):
    """Two shared FC layers, then class logits and class-agnostic deltas."""

    def __init__(self, channels: int, pool: int, fc_dim: int, num_categories: int):
        super().__init__()
        self.fc1 = nn.Linear(channels * pool * pool, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.cls = nn.Linear(fc_dim, num_categories + 1)
        self.reg = nn.Linear(fc_dim, 4)

    def forward(self, pooled):
        x = F.relu(self.fc1(pooled.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


class MaskHead(nn.Module):
    def __init__(self, channels: int, pool: int, num_categories: int, fc_fusion: bool = False):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(4))
        self.up = nn.ConvTranspose2d(channels, channels, 2, 2)
        self.out = nn.Conv2d(channels, num_categories, 1)
        self.fc_fusion = None
        if fc_fusion:
            half = max(1, channels // 2)
            self.fc_fusion = nn.ModuleDict({
                "conv1": nn.Conv2d(channels, channels, 3, padding=1),
                "conv2": nn.Conv2d(channels, half, 3, padding=1),
                "fc": nn.Linear(half * pool * pool, (2 * pool) ** 2),
            })

    def forward(self, pooled):
        x = pooled
        fused = None
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i == 2 and self.fc_fusion is not None:
                y = F.relu(self.fc_fusion["conv1"](x))
                y = F.relu(self.fc_fusion["conv2"](y))
                side = 2 * x.shape[-1]
                fused = self.fc_fusion["fc"](y.flatten(1)).reshape(-1, 1, side, side)
        logits = self.out(F.relu(self.up(x)))
        return logits if fused is None else logits + fused


# ---------------------------------------------------------------------------
# Model


class MaskRCNN(nn.Module):
    def __init__(self, variant: DetectorVariant, num_categories: int = 2, cfg: DetectorConfig | None = None):
        super().__init__()
        cfg = cfg or DetectorConfig()
        self.variant = variant
        self.num_categories = num_categories
        self.category_names = CATEGORY_NAMES[:num_categories]
        apanet = variant.kind == "apanet"
        self.use_path_augmentation = apanet if cfg.path_augmentation is None else cfg.path_augmentation
        self.use_attention = apanet if cfg.spatial_attention is None else cfg.spatial_attention
        self.cfg = cfg

        if variant.kind == "hrnet":
            self.backbone = HRNetBackbone(cfg.hrnet_channels)
        else:
            self.backbone = ResNetFeatures(cfg.backbone_channels)
        self.strides = self.backbone.strides
        ch = cfg.fpn_channels
        self.fpn = FPN(self.backbone.out_channels, ch)
        nlev = len(self.strides)
        if self.use_path_augmentation:
            self.bottom_up = BottomUpAugmentation(ch, nlev)
        if self.use_attention:
            self.attention = nn.ModuleList(SpatialAttention() for _ in range(nlev))
        na = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        self.rpn = RPNHead(ch, na)
        self.box_heads = nn.ModuleList(
            BoxHead(ch, cfg.box_pool_size, cfg.fc_dim, num_categories) for _ in range(variant.stages))
        self.mask_stages = MASK_STAGES.get(variant.kind, (0,))
        self.mask_heads = nn.ModuleList(
            MaskHead(ch, cfg.mask_pool_size, num_categories, cfg.fc_fusion) for _ in self.mask_stages)
        self._anchor_cache: dict = {}

    @property
    def adaptive_pooling(self) -> bool:
        # Fusing across levels needs the augmented (N) pyramid.
        return self.use_path_augmentation

    def pyramid(self, x: torch.Tensor) -> PyramidFeatures:
        pyr = self.fpn(self.backbone(x), self.strides)
        where = self.cfg.attention_on
        if self.use_attention and (where in ("p", "both") or not self.use_path_augmentation):
            pyr = PyramidFeatures([a(p) for a, p in zip(self.attention, pyr.p)], pyr.strides)
        if self.use_path_augmentation:
            pyr = self.bottom_up(pyr)
            if self.use_attention and where in ("n", "both"):
                pyr = PyramidFeatures(pyr.p, pyr.strides, [a(n) for a, n in zip(self.attention, pyr.n)])
        return pyr

    def anchors(self, pyramid: PyramidFeatures) -> AnchorSet:
        grids = tuple(tuple(f.shape[-2:]) for f in pyramid.levels)
        if grids not in self._anchor_cache:
            self._anchor_cache[grids] = make_anchors(grids, self.strides, self.cfg.anchor_scales,
                                                     self.cfg.anchor_ratios)
        return self._anchor_cache[grids]

    def pool(self, levels: Sequence[torch.Tensor], boxes: torch.Tensor, size: int,
             image_size: tuple[int, int]) -> torch.Tensor:
        """ROI features for pixel ``boxes`` on a padded image of ``image_size`` (w, h)."""
        w, h = image_size
        norm = boxes / boxes.new_tensor([w, h, w, h])
        norm = _ensure_positive_area(norm)
        out_size = (size, size)
        if self.adaptive_pooling:
            return adaptive_feature_pooling(norm, levels, out_size)
        bw = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6)
        bh = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)
        k = torch.floor(2 + torch.log2(torch.sqrt(bw * bh) / self.cfg.canonical_scale + 1e-8))
        # Level index 0 is stride 4; the canonical scale maps to stride 16.
        k = (k + 2 - int(math.log2(self.strides[0]))).clamp(0, len(levels) - 1).long()
        out = levels[0].new_zeros((len(boxes), levels[0].shape[1], size, size))
        for lvl in range(len(levels)):
            sel = (k == lvl).nonzero(as_tuple=True)[0]
            if sel.numel():
                out = out.index_put((sel,), roi_align(levels[lvl], norm[sel], out_size))
        return out

    def box_head(self, stage: int, levels, boxes, image_size):
        return self.box_heads[stage](self.pool(levels, boxes, self.cfg.box_pool_size, image_size))

    def mask_logits(self, head: int, levels, boxes, image_size):
        return self.mask_heads[head](self.pool(levels, boxes, self.cfg.mask_pool_size, image_size))

    def mask_probs(self, levels, boxes, image_size) -> torch.Tensor:
        """Per-class 28x28 mask probabilities, averaged over mask branches."""
        probs = [torch.sigmoid(self.mask_logits(i, levels, boxes, image_size))
                 for i in range(len(self.mask_heads))]
        return torch.stack(probs).mean(0)


def _ensure_positive_area(norm: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    x2 = torch.maximum(norm[:, 2], norm[:, 0] + eps)
    y2 = torch.maximum(norm[:, 3], norm[:, 1] + eps)
    return torch.stack([norm[:, 0], norm[:, 1], x2, y2], dim=1)


def _init_predictors(model: MaskRCNN, seed: int):
    gen = torch.Generator().manual_seed(int(seed) + 1)
    with torch.no_grad():
        for layer, std in [(model.rpn.cls, 0.01), (model.rpn.reg, 0.01)]:
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * std)
            layer.bias.zero_()
        for head in model.box_heads:
            head.cls.weight.copy_(torch.randn(head.cls.weight.shape, generator=gen) * 0.01)
            head.reg.weight.copy_(torch.randn(head.reg.weight.shape, generator=gen) * 0.001)
            head.cls.bias.zero_()
            head.reg.bias.zero_()


def build_detector(variant: DetectorVariant | str = "apanet", num_categories: int = 2,
                   cfg: DetectorConfig | None = None, seed: int = 0) -> MaskRCNN:
    if isinstance(variant, str):
        variant = DetectorVariant(variant)
    model = seeded_init(MaskRCNN(variant, num_categories, cfg), seed)
    _init_predictors(model, seed)
    return model.eval()


# ---------------------------------------------------------------------------
# Inference


def prepare_image(img: np.ndarray, cfg: DetectorConfig):
    """Downscale beyond ``max_side`` (aspect kept), normalize and pad.

    Returns ``(tensor (1, 3, Hp, Wp), scale, (w, h) after scaling)``.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    h, w = arr.shape[:2]
    scale = min(1.0, cfg.max_side / max(h, w))
    if scale < 1.0:
        w2, h2 = max(1, round(w * scale)), max(1, round(h * scale))
        arr = resize_image(arr, (w2, h2))
        h, w = h2, w2
    x = torch.from_numpy(arr.astype(np.float32) / 255.0 - 0.5).permute(2, 0, 1)
    d = cfg.size_divisor
    ph, pw = (-h) % d, (-w) % d
    x = F.pad(x, (0, pw, 0, ph))
    return x[None], scale, (w, h)


def select_proposals(logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
                     image_size: tuple[float, float], top_k: int, pre_nms_top_n: int = 1000,
                     nms_threshold: float = 0.7, min_size: float = 0.0):
    """Decode, clip and suppress RPN outputs.  Returns (boxes, scores)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = torch.sigmoid(logits)
    order = torch.sort(scores, descending=True, stable=True).indices[:pre_nms_top_n]
    boxes = clip_boxes(decode(anchors[order], deltas[order]), *image_size)
    scores = scores[order]
    wh = boxes[:, 2:] - boxes[:, :2]
    ok = ((wh[:, 0] > min_size) & (wh[:, 1] > min_size)).nonzero(as_tuple=True)[0]
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes.detach(), scores.detach(), nms_threshold)[:top_k]
    return boxes[keep], scores[keep]


def propose_regions(model: MaskRCNN, pyramid: PyramidFeatures, anchors: AnchorSet, top_k: int,
                    image_size: tuple[float, float]):
    logits, deltas = model.rpn(pyramid.levels)
    return select_proposals(logits, deltas, anchors.all, image_size, top_k,
                            model.cfg.rpn_pre_nms_top_n, model.cfg.rpn_nms_threshold,
                            model.cfg.rpn_min_size)


@dataclass
class CascadeOutput:
    stage_boxes: list[torch.Tensor]  # input proposals, then each stage's refinement
    stage_probs: list[torch.Tensor]  # class probabilities per stage
    trace: list[dict] = field(default_factory=list)

    @property
    def boxes(self) -> torch.Tensor:
        return self.stage_boxes[-1]

    @property
    def probs(self) -> torch.Tensor:
        return torch.stack(self.stage_probs).mean(0)


def cascade_forward(model: MaskRCNN, levels: Sequence[torch.Tensor], proposals: torch.Tensor,
                    image_size: tuple[int, int], clip_to: tuple[float, float] | None = None) -> CascadeOutput:
    """Run the chained detection heads; stage t refines stage t-1's boxes."""
    if not model.variant.is_cascade:
        raise UsageError(f"cascade_forward needs a cascade variant, got {model.variant.kind!r}")
    clip_to = clip_to or image_size
    out = CascadeOutput([proposals], [])
    boxes = proposals
    for t in range(model.variant.stages):
        logits, deltas = model.box_head(t, levels, boxes, image_size)
        refined = clip_boxes(decode(boxes, deltas, model.cfg.box_stds[t]), *clip_to)
        out.stage_probs.append(torch.softmax(logits, dim=1))
        out.stage_boxes.append(refined)
        out.trace.append({"stage": t, "input": boxes, "output": refined})
        boxes = refined
    return out


def paste_mask(prob: torch.Tensor, box: Sequence[float], width: int, height: int) -> np.ndarray:
    """Bilinearly map a box-local probability grid onto the image raster."""
    x1, y1, x2, y2 = (float(v) for v in box)
    out = np.zeros((height, width), dtype=np.float32)
    c0, c1 = max(0, int(math.floor(x1))), min(width, int(math.ceil(x2)))
    r0, r1 = max(0, int(math.floor(y1))), min(height, int(math.ceil(y2)))
    if c1 <= c0 or r1 <= r0 or x2 <= x1 or y2 <= y1:
        return out
    cx = torch.arange(c0, c1, dtype=torch.float32) + 0.5
    cy = torch.arange(r0, r1, dtype=torch.float32) + 0.5
    gx = (cx - x1) / (x2 - x1) * 2 - 1
    gy = (cy - y1) / (y2 - y1) * 2 - 1
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)[None]
    vals = F.grid_sample(prob[None, None].float(), grid, mode="bilinear", padding_mode="border",
                         align_corners=False)[0, 0]
    inside = ((gx.abs() <= 1)[None, :] & (gy.abs() <= 1)[:, None]).float()
    out[r0:r1, c0:c1] = (vals * inside).numpy()
    return out


def detect(model: MaskRCNN, img: np.ndarray, score_threshold: float = 0.5) -> list[Detection]:
    """Detections scoring above ``score_threshold`` with binarized masks."""
    cfg = model.cfg
    arr = np.asarray(img)
    h0, w0 = arr.shape[:2]
    model.eval()
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        x, scale, (w, h) = prepare_image(arr, cfg)
        x = x.to(dtype)
        padded = (x.shape[-1], x.shape[-2])
        pyr = model.pyramid(x)
        levels = pyr.levels
        proposals, _ = propose_regions(model, pyr, model.anchors(pyr), cfg.rpn_post_nms_top_n_test, (w, h))
        if len(proposals) == 0:
            return []
        if model.variant.is_cascade:
            co = cascade_forward(model, levels, proposals, padded, clip_to=(w, h))
            boxes, probs = co.boxes, co.probs
        else:
            logits, deltas = model.box_head(0, levels, proposals, padded)
            boxes = clip_boxes(decode(proposals, deltas, cfg.box_stds[0]), w, h)
            probs = torch.softmax(logits, dim=1)
        fg = probs[:, 1:]
        idx, cls = (fg > score_threshold).nonzero(as_tuple=True)
        if idx.numel() == 0:
            return []
        cand_boxes, cand_scores = boxes[idx], fg[idx, cls]
        area_ok = ((cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1]))
        cand_boxes, cand_scores, cls = cand_boxes[area_ok], cand_scores[area_ok], cls[area_ok]
        keep = batched_nms(cand_boxes, cand_scores, cls, cfg.nms_threshold)[:cfg.max_detections]
        cand_boxes, cand_scores, cls = cand_boxes[keep], cand_scores[keep], cls[keep]
        if len(cand_boxes) == 0:
            return []
        mprobs = model.mask_probs(levels, cand_boxes, padded)
        mprobs = mprobs[torch.arange(len(cls)), cls]
        orig = clip_boxes(cand_boxes.double() / scale, w0, h0)
    dets = []
    for b, s, c, m in zip(orig.tolist(), cand_scores.tolist(), cls.tolist(), mprobs):
        if b[2] <= b[0] or b[3] <= b[1]:
            continue
        mask = paste_mask(m, b, w0, h0) > cfg.mask_threshold
        if not mask.any():
            continue
        dets.append(Detection(model.category_names[c], float(s), tuple(b), mask))
    return dets


def zero_weights(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def with_config(cfg: DetectorConfig, **changes) -> DetectorConfig:
    return replace(cfg, **changes)
