"""Joint RPN + head + mask training for the detector family."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .. import checkpoint
from ..dataset_io import ImageRecord, LabeledDataset, rasterize_polygon
from ..nn_blocks import roi_align
from .augment import augment as augment_record
from .boxes import box_iou, clip_boxes, decode, encode, smooth_l1
from .model import DetectorConfig, DetectorVariant, MaskRCNN, prepare_image, select_proposals


class DataError(ValueError):
    pass


@dataclass
class DetectorTrainConfig:
    learning_rate: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 100
    mask_loss: str = "cross-entropy"
    box_loss: str = "smooth_l1"
    # Linear warmup over this many optimizer steps, starting at warmup_factor * lr.
    warmup_steps: int = 0
    warmup_factor: float = 0.1
    grad_clip: float | None = None
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 128
    fg_fraction: float = 0.25

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be >= 0")
        if self.momentum >= 1:
            raise ValueError("momentum must be < 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mask_loss != "cross-entropy":
            raise ValueError("only the per-pixel cross-entropy mask loss is supported")
        if self.box_loss != "smooth_l1":
            raise ValueError("only the smooth L1 box loss is supported")
        if not 0 < self.rpn_pos_fraction <= 1 or not 0 < self.fg_fraction <= 1:
            raise ValueError("sampling fractions must be in (0, 1]")


@dataclass
class Targets:
    boxes: torch.Tensor   # (G, 4) pixels on the network input
    labels: torch.Tensor  # (G,) 1-based category index
    masks: torch.Tensor   # (G, H, W) float {0, 1} on the network input


def record_targets(rec: ImageRecord, category_names, scale: float = 1.0) -> Targets:
    """Ground-truth boxes, labels and masks for one record."""
    boxes, labels, masks = [], [], []
    w, h = max(1, round(rec.width * scale)), max(1, round(rec.height * scale))
    for a in rec.annotations:
        if a.category not in category_names:
            raise DataError(f"record {rec.id}: category {a.category!r} not handled by this model")
        v = a.vertices * scale
        m = rasterize_polygon(v, w, h)
        if not m.any():
            continue
        x1, y1 = np.clip(v.min(0), 0, [w, h])
        x2, y2 = np.clip(v.max(0), 0, [w, h])
        if x2 <= x1 or y2 <= y1:
            continue
        boxes.append([x1, y1, x2, y2])
        labels.append(category_names.index(a.category) + 1)
        masks.append(m)
    return Targets(torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
                   torch.tensor(labels, dtype=torch.long),
                   torch.from_numpy(np.array(masks, dtype=np.float32).reshape(-1, h, w)))


def _sample(pos: torch.Tensor, neg: torch.Tensor, total: int, pos_fraction: float,
            gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    n_pos = min(len(pos), int(total * pos_fraction))
    pos = pos[torch.randperm(len(pos), generator=gen)[:n_pos]]
    n_neg = min(len(neg), total - n_pos)
    neg = neg[torch.randperm(len(neg), generator=gen)[:n_neg]]
    return pos, neg


def rpn_labels(anchors: torch.Tensor, gt: torch.Tensor, cfg: DetectorTrainConfig):
    """Per-anchor label (1 object, 0 background, -1 ignored) and matched GT index."""
    labels = torch.full((len(anchors),), -1, dtype=torch.long)
    if len(gt) == 0:
        labels[:] = 0
        return labels, torch.zeros(len(anchors), dtype=torch.long)
    iou = box_iou(anchors, gt)
    best, match = iou.max(dim=1)
    labels[best < cfg.rpn_neg_iou] = 0
    labels[best >= cfg.rpn_pos_iou] = 1
    # Every GT keeps its best anchors, however poor the overlap.
    gt_best = iou.max(dim=0).values
    for g in range(len(gt)):
        if gt_best[g] > 0:
            hit = (iou[:, g] == gt_best[g]).nonzero(as_tuple=True)[0]
            labels[hit] = 1
            match[hit] = g
    return labels, match


def _rpn_loss(logits, deltas, anchors, targets: Targets, cfg: DetectorTrainConfig, gen):
    labels, match = rpn_labels(anchors, targets.boxes, cfg)
    pos, neg = _sample((labels == 1).nonzero(as_tuple=True)[0], (labels == 0).nonzero(as_tuple=True)[0],
                       cfg.rpn_batch, cfg.rpn_pos_fraction, gen)
    idx = torch.cat([pos, neg])
    n = max(1, len(idx))
    cls = F.binary_cross_entropy_with_logits(logits[idx], (labels[idx] == 1).to(logits.dtype),
                                             reduction="sum") / n
    reg = logits.new_zeros(())
    if len(pos):
        tgt = encode(anchors[pos], targets.boxes[match[pos]])
        reg = smooth_l1(deltas[pos], tgt.to(deltas.dtype)) / n
    return cls, reg


def _mask_targets(targets: Targets, rois: torch.Tensor, match: torch.Tensor, size: int) -> torch.Tensor:
    h, w = targets.masks.shape[-2:]
    norm = rois / rois.new_tensor([w, h, w, h])
    x2 = torch.maximum(norm[:, 2], norm[:, 0] + 1e-6)
    y2 = torch.maximum(norm[:, 3], norm[:, 1] + 1e-6)
    norm = torch.stack([norm[:, 0], norm[:, 1], x2, y2], dim=1)
    out = roi_align(targets.masks[:, None], norm, (size, size), batch_index=match)
    return (out[:, 0] >= 0.5).float()


def _head_losses(model: MaskRCNN, levels, proposals, targets: Targets, padded, clip_to,
                 cfg: DetectorTrainConfig, gen) -> dict:
    mcfg = model.cfg
    losses = {"cls": 0.0, "reg": 0.0, "mask": 0.0}
    rois = torch.cat([proposals.detach(), targets.boxes.to(proposals.dtype)])
    for t in range(model.variant.stages):
        weight = mcfg.stage_loss_weights[t] if model.variant.is_cascade else 1.0
        if len(targets.boxes):
            best, match = box_iou(rois, targets.boxes).max(dim=1)
            fg_mask = best >= mcfg.cascade_iou[t]
        else:
            match = torch.zeros(len(rois), dtype=torch.long)
            fg_mask = torch.zeros(len(rois), dtype=torch.bool)
        pos, neg = _sample(fg_mask.nonzero(as_tuple=True)[0], (~fg_mask).nonzero(as_tuple=True)[0],
                           cfg.roi_batch, cfg.fg_fraction, gen)
        idx = torch.cat([pos, neg])
        sampled = rois[idx]
        n_fg = len(pos)
        cls_target = torch.zeros(len(idx), dtype=torch.long)
        if n_fg:
            cls_target[:n_fg] = targets.labels[match[pos]]
        logits, deltas = model.box_head(t, levels, sampled, padded)
        losses["cls"] = losses["cls"] + weight * F.cross_entropy(logits, cls_target)
        if n_fg:
            tgt = encode(sampled[:n_fg], targets.boxes[match[pos]], mcfg.box_stds[t])
            losses["reg"] = losses["reg"] + weight * smooth_l1(deltas[:n_fg], tgt.to(deltas.dtype)) / len(idx)
        if t in model.mask_stages and n_fg:
            head = model.mask_stages.index(t)
            mlog = model.mask_logits(head, levels, sampled[:n_fg], padded)
            mlog = mlog[torch.arange(n_fg), cls_target[:n_fg] - 1]
            mtgt = _mask_targets(targets, sampled[:n_fg].detach(), match[pos], mcfg.mask_size)
            losses["mask"] = losses["mask"] + weight * F.binary_cross_entropy_with_logits(mlog, mtgt)
        if t + 1 < model.variant.stages:
            refined = clip_boxes(decode(sampled, deltas.detach(), mcfg.box_stds[t]), *clip_to)
            ok = (refined[:, 2] > refined[:, 0]) & (refined[:, 3] > refined[:, 1])
            rois = torch.cat([refined[ok], targets.boxes.to(refined.dtype)])
    return losses


def detector_losses(model: MaskRCNN, rec: ImageRecord, cfg: DetectorTrainConfig | None = None,
                    gen: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """Loss components for one image: rpn_cls, rpn_reg, cls, reg, mask."""
    cfg = cfg or DetectorTrainConfig()
    gen = gen or torch.Generator().manual_seed(0)
    if rec.pixels is None:
        raise DataError(f"record {rec.id} has no pixels loaded")
    dtype = next(model.parameters()).dtype
    x, scale, (w, h) = prepare_image(rec.pixels, model.cfg)
    x = x.to(dtype)
    targets = record_targets(rec, list(model.category_names), scale)
    padded = (x.shape[-1], x.shape[-2])
    pyr = model.pyramid(x)
    levels = pyr.levels
    anchors = model.anchors(pyr).all
    logits, deltas = model.rpn(levels)
    rpn_cls, rpn_reg = _rpn_loss(logits, deltas, anchors, targets, cfg, gen)
    with torch.no_grad():
        proposals, _ = select_proposals(logits, deltas, anchors, (w, h), model.cfg.rpn_post_nms_top_n_train,
                                        model.cfg.rpn_pre_nms_top_n, model.cfg.rpn_nms_threshold,
                                        model.cfg.rpn_min_size)
    heads = _head_losses(model, levels, proposals, targets, padded, (w, h), cfg, gen)
    zero = logits.new_zeros(())
    return {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg,
            **{k: v if torch.is_tensor(v) else zero for k, v in heads.items()}}


def train_detector(model: MaskRCNN, data: LabeledDataset, cfg: DetectorTrainConfig | None = None,
                   seed: int = 0, augment: bool = False):
    """Momentum SGD with weight decay, one image per step.

    Returns ``(model, history)``; history holds per-epoch means of the total
    loss and of each component.
    """
    cfg = cfg or DetectorTrainConfig()
    if not data.records:
        raise DataError("empty training set")
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(int(seed))
    rng = np.random.default_rng(seed)
    history, step = [], 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        for i in torch.randperm(len(data.records), generator=gen).tolist():
            rec = data.records[i]
            if augment:
                rec = augment_record(rec, rng)
            if cfg.warmup_steps and step < cfg.warmup_steps:
                f = cfg.warmup_factor + (1 - cfg.warmup_factor) * step / cfg.warmup_steps
            else:
                f = 1.0
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * f
            parts = detector_losses(model, rec, cfg, gen)
            loss = sum(parts.values())
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            for k, v in [("loss", loss), *parts.items()]:
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        n = len(data.records)
        history.append({"epoch": epoch, **{k: v / n for k, v in sums.items()}})
        if not math.isfinite(history[-1]["loss"]):
            raise FloatingPointError(f"loss diverged at epoch {epoch}")
    model.eval()
    return model, history


def _cfg_to_json(cfg: DetectorConfig) -> dict:
    return {k: (list(map(list, v)) if k == "box_stds" else list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(cfg).items()}


def _cfg_from_json(d: dict) -> DetectorConfig:
    fields = {}
    for k, v in d.items():
        if k == "box_stds":
            v = tuple(tuple(s) for s in v)
        elif isinstance(v, list):
            v = tuple(v)
        fields[k] = v
    return DetectorConfig(**fields)


def save_detector(path: str | Path, model: MaskRCNN) -> Path:
    meta = {"kind": "detector", "variant": model.variant.kind, "num_categories": model.num_categories,
            "config": _cfg_to_json(model.cfg)}
    return checkpoint.save_module(path, model, meta)


def load_detector(path: str | Path) -> MaskRCNN:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "detector":
        raise checkpoint.CheckpointError(f"{path} is not a detector checkpoint")
    model = MaskRCNN(DetectorVariant(meta["variant"]), meta["num_categories"], _cfg_from_json(meta["config"]))
    checkpoint.load_into(model, tensors)
    return model.eval()
