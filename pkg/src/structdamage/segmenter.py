"""U-Net encoder-decoder producing per-pixel damage probabilities."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .dataset_io import LabeledDataset
from .nn_blocks import make_norm, seeded_init


class DataError(ValueError):
    pass


@dataclass
class SegTrainConfig:
    learning_rate: float = 0.0001
    epochs: int = 50
    batch_size: int | None = None  # None: full-batch gradient descent

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def _double_conv(cin, cout, norm):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), make_norm(norm, cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), make_norm(norm, cout), nn.ReLU(),
    )


class UNetModel(nn.Module):
    def __init__(self, depth: int = 4, base_channels: int = 16, num_categories: int = 1,
                 in_channels: int = 3, norm: str | None = "group"):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if num_categories not in (1, 2):
            raise ValueError("num_categories must be 1 or 2")
        self.depth = depth
        self.base_channels = base_channels
        self.num_categories = num_categories
        self.norm = norm
        chans = self.encoder_channels
        self.encoder = nn.ModuleList()
        cin = in_channels
        for c in chans:
            self.encoder.append(_double_conv(cin, c, norm))
            cin = c
        self.bottleneck = _double_conv(chans[-1], 2 * chans[-1], norm)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        cin = 2 * chans[-1]
        for c in reversed(chans):
            self.up.append(nn.ConvTranspose2d(cin, c, 2, 2))
            self.decoder.append(_double_conv(2 * c, c, norm))
            cin = c
        self.head = nn.Conv2d(chans[0], num_categories, 1)
        # Per-level switch used to ablate skip links in structural tests.
        self.skip_enabled = [True] * depth

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    @property
    def decoder_channels(self) -> list[int]:
        return list(reversed(self.encoder_channels))

    def forward(self, x):
        skips = []
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for level, (up, dec) in enumerate(zip(self.up, self.decoder)):
            x = up(x)
            skip = skips[self.depth - 1 - level]
            if not self.skip_enabled[self.depth - 1 - level]:
                skip = torch.zeros_like(skip)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


def build_unet(depth: int = 4, base_channels: int = 16, num_categories: int = 1, seed: int = 0,
               norm: str | None = "group") -> UNetModel:
    return seeded_init(UNetModel(depth, base_channels, num_categories, norm=norm), seed)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def _pad_amount(n: int, multiple: int) -> int:
    return (-n) % multiple


def logits(model: UNetModel, x: torch.Tensor) -> torch.Tensor:
    """Forward a (N, 3, H, W) batch of any size.

    Sides not divisible by ``2**depth`` are reflect-padded (bottom/right)
    and the output cropped back.
    """
    h, w = x.shape[-2:]
    m = 2 ** model.depth
    ph, pw = _pad_amount(h, m), _pad_amount(w, m)
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return model(x)[..., :h, :w]


def segment(model: UNetModel, img: np.ndarray) -> np.ndarray:
    """Probability map of shape (num_categories, H, W) at the input resolution."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = torch.sigmoid(logits(model, to_tensor(img)[None].to(dtype)))[0]
    return out.double().numpy()


def binarize(probmap: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    return np.asarray(probmap) > threshold


def bce_loss(model: UNetModel, images: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits(model, images), targets)


def segmentation_pairs(ds: LabeledDataset, categories: Sequence[str] = ("crack",)):
    """(image, (C, H, W) mask) pairs from a labeled dataset."""
    return [(r.pixels, np.stack([r.category_mask(c) for c in categories])) for r in ds.records]


def train_unet(model: UNetModel, data, cfg: SegTrainConfig | None = None, seed: int = 0):
    """Minimize mean binary cross-entropy by plain gradient descent.

    ``data`` is a sequence of ``(image, mask)`` where mask is (H, W) or
    (num_categories, H, W).  Returns ``(model, history)``.
    """
    cfg = cfg or SegTrainConfig()
    xs, ys = [], []
    for i, (img, mask) in enumerate(data):
        mask = np.asarray(mask)
        if mask.ndim == 2:
            mask = mask[None]
        if mask.shape[1:] != np.asarray(img).shape[:2]:
            raise DataError(f"pair {i}: mask {mask.shape[1:]} vs image {np.asarray(img).shape[:2]}")
        if mask.shape[0] != model.num_categories:
            raise DataError(f"pair {i}: {mask.shape[0]} mask channels for a "
                            f"{model.num_categories}-category model")
        xs.append(to_tensor(img))
        ys.append(torch.from_numpy(mask.astype(np.float32)))
    if len({tuple(x.shape) for x in xs}) != 1:
        raise DataError("all training images must share one size")
    dtype = next(model.parameters()).dtype
    x_all, y_all = torch.stack(xs).to(dtype), torch.stack(ys).to(dtype)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(int(seed))
    bs = cfg.batch_size or len(x_all)
    history = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            loss = bce_loss(model, x_all[idx], y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append({"epoch": epoch, "loss": total / len(x_all)})
    model.eval()
    return model, history


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def save_unet(path: str | Path, model: UNetModel) -> Path:
    meta = {"kind": "unet", "depth": model.depth, "base_channels": model.base_channels,
            "num_categories": model.num_categories, "norm": model.norm}
    return checkpoint.save_module(path, model, meta)


def load_unet(path: str | Path) -> UNetModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "unet":
        raise checkpoint.CheckpointError(f"{path} is not a U-Net checkpoint")
    model = UNetModel(meta["depth"], meta["base_channels"], meta["num_categories"], norm=meta["norm"])
    checkpoint.load_into(model, tensors)
    return model.eval()
