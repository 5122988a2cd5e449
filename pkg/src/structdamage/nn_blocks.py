"""Differentiable building blocks shared by the classifier, U-Net and detectors.

Tensors are (batch, channels, height, width).  Boxes handed to the pooling
functions are normalized ``(x1, y1, x2, y2)`` in [0, 1] relative to the
feature map extent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled Gaussian weights, zero biases, unit norm scales.

    Every parameter is drawn from one generator in ``named_modules`` order so
    two modules built the same way with the same seed are identical.  Layers
    inside a module with ``linear_init = True`` (no activation follows them)
    get unit gain instead of the ReLU gain of 2.
    """
    gen = torch.Generator().manual_seed(int(seed))
    linear = set()
    for m in module.modules():
        if getattr(m, "linear_init", False):
            linear.update(id(c) for c in m.modules())
    for _, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            fan_in = w[0].numel() if not isinstance(m, nn.ConvTranspose2d) else w.shape[0] * w[0, 0].numel()
            std = math.sqrt((1.0 if id(m) in linear else 2.0) / fan_in)
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.GroupNorm, nn.BatchNorm2d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def make_norm(kind: str | None, channels: int) -> nn.Module:
    if kind is None or kind == "none":
        return nn.Identity()
    if kind == "group":
        groups = math.gcd(channels, 8)
        return nn.GroupNorm(groups, channels)
    raise ValueError(f"unknown norm {kind!r}")


@dataclass(frozen=True)
class BlockConfig:
    channels_in: int
    channels_out: int
    stride: int = 1
    attention_enabled: bool = False

    def __post_init__(self):
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError("channel counts must be >= 1")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")


class ResidualBlock(nn.Module):
    """Pre-activation basic block: ``x + transform(x)``.

    Without a trailing activation, zero transform weights give the exact
    identity when shapes allow it.
    """

    def __init__(self, cfg: BlockConfig, norm: str | None = "group", activation: bool = True):
        super().__init__()
        self.cfg = cfg
        act = nn.ReLU() if activation else nn.Identity()
        cin, cout = cfg.channels_in, cfg.channels_out
        self.transform = nn.Sequential(
            make_norm(norm, cin), act,
            nn.Conv2d(cin, cout, 3, cfg.stride, 1, bias=False),
            make_norm(norm, cout), act,
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
        )
        if cfg.stride == 1 and cin == cout:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(cin, cout, 1, cfg.stride, bias=False)
        self.attention = SpatialAttention() if cfg.attention_enabled else None

    def forward(self, x):
        if x.shape[1] != self.cfg.channels_in:
            raise ShapeError(f"expected {self.cfg.channels_in} input channels, got {x.shape[1]}")
        out = self.transform(x)
        if self.attention is not None:
            out = self.attention(out)
        return out + self.shortcut(x)


class BottleneckBlock(nn.Module):
    """Pre-activation 1x1-3x3-1x1 block used by the deep classifier configs."""

    expansion = 4

    def __init__(self, cfg: BlockConfig, norm: str | None = "group"):
        super().__init__()
        self.cfg = cfg
        cin, cout = cfg.channels_in, cfg.channels_out
        mid = max(1, cout // self.expansion)
        self.transform = nn.Sequential(
            make_norm(norm, cin), nn.ReLU(), nn.Conv2d(cin, mid, 1, bias=False),
            make_norm(norm, mid), nn.ReLU(), nn.Conv2d(mid, mid, 3, cfg.stride, 1, bias=False),
            make_norm(norm, mid), nn.ReLU(), nn.Conv2d(mid, cout, 1, bias=False),
        )
        if cfg.stride == 1 and cin == cout:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(cin, cout, 1, cfg.stride, bias=False)

    def forward(self, x):
        if x.shape[1] != self.cfg.channels_in:
            raise ShapeError(f"expected {self.cfg.channels_in} input channels, got {x.shape[1]}")
        return self.transform(x) + self.shortcut(x)


def residual_block(x: torch.Tensor, cfg: BlockConfig, seed: int = 0, **kwargs) -> torch.Tensor:
    """Functional form: build a seeded block matching ``x``'s dtype and apply it."""
    block = seeded_init(ResidualBlock(cfg, **kwargs), seed).to(x.dtype)
    return block(x)


# ---------------------------------------------------------------------------
# Pyramids


@dataclass
class PyramidFeatures:
    p: list[torch.Tensor]
    strides: tuple[int, ...]
    n: list[torch.Tensor] | None = None

    def __post_init__(self):
        if len(self.p) != len(self.strides):
            raise ShapeError("one stride per pyramid level is required")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ShapeError(f"pyramid strides must double level to level, got {self.strides}")
        if self.n is not None:
            if len(self.n) != len(self.p):
                raise ShapeError("P and N pyramids differ in level count")
            for pi, ni in zip(self.p, self.n):
                if pi.shape != ni.shape:
                    raise ShapeError(f"N level shape {tuple(ni.shape)} != P level {tuple(pi.shape)}")

    @property
    def levels(self) -> list[torch.Tensor]:
        """The levels downstream heads consume: N when present, else P."""
        return self.n if self.n is not None else self.p


def _check_strides(strides: Sequence[int]):
    for s in strides:
        if s < 1 or s & (s - 1):
            raise ShapeError(f"stride {s} is not a power of two")
    for a, b in zip(strides, strides[1:]):
        if b <= a:
            raise ShapeError(f"strides must increase, got {tuple(strides)}")


class FPN(nn.Module):
    """Top-down pyramid: lateral 1x1 projections, nearest upsampling, 3x3 smoothing."""

    linear_init = True

    def __init__(self, in_channels: Sequence[int], out_channels: int = 64):
        super().__init__()
        if len(in_channels) < 2:
            raise ValueError("an FPN needs at least two backbone levels")
        self.out_channels = out_channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1)
                                    for _ in in_channels)

    def forward(self, features: Sequence[torch.Tensor], strides: Sequence[int]) -> PyramidFeatures:
        if len(features) != len(self.lateral):
            raise ValueError(f"expected {len(self.lateral)} backbone levels, got {len(features)}")
        _check_strides(strides)
        lat = [conv(f) for conv, f in zip(self.lateral, features)]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + F.interpolate(lat[i], size=lat[i - 1].shape[-2:], mode="nearest")
        return PyramidFeatures([conv(t) for conv, t in zip(self.output, lat)], tuple(strides))


def fpn_forward(backbone_features: Sequence[torch.Tensor], strides: Sequence[int],
                out_channels: int = 64, seed: int = 0) -> PyramidFeatures:
    fpn = seeded_init(FPN([f.shape[1] for f in backbone_features], out_channels), seed)
    return fpn.to(backbone_features[0].dtype)(backbone_features, strides)


class BottomUpAugmentation(nn.Module):
    """Low-to-high path: N_1 = P_1, N_{i+1} = fuse(down(N_i) + P_{i+1})."""

    linear_init = True

    def __init__(self, channels: int, num_levels: int):
        super().__init__()
        self.down = nn.ModuleList(nn.Conv2d(channels, channels, 3, 2, 1) for _ in range(num_levels - 1))
        self.fuse = nn.ModuleList(nn.Conv2d(channels, channels, 3, 1, 1) for _ in range(num_levels - 1))

    def forward(self, pyramid: PyramidFeatures) -> PyramidFeatures:
        p = pyramid.p
        if len(p) != len(self.down) + 1:
            raise ShapeError(f"expected {len(self.down) + 1} P levels, got {len(p)}")
        n = [p[0]]
        for i, (down, fuse) in enumerate(zip(self.down, self.fuse)):
            d = down(n[-1])
            if d.shape[-2:] != p[i + 1].shape[-2:]:
                d = F.interpolate(d, size=p[i + 1].shape[-2:], mode="nearest")
            n.append(fuse(d + p[i + 1]))
        return PyramidFeatures(list(p), pyramid.strides, n)


def bottom_up_augmentation(pyramid: PyramidFeatures, seed: int = 0) -> PyramidFeatures:
    mod = seeded_init(BottomUpAugmentation(pyramid.p[0].shape[1], len(pyramid.p)), seed)
    return mod.to(pyramid.p[0].dtype)(pyramid)


# ---------------------------------------------------------------------------
# Attention


class SpatialAttention(nn.Module):
    """Per-location gate from channel-mean and channel-max maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def attention_map(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.attention_map(x)


def spatial_attention(x: torch.Tensor, kernel_size: int = 7, seed: int = 0) -> torch.Tensor:
    mod = seeded_init(SpatialAttention(kernel_size), seed).to(x.dtype)
    return mod(x)


# ---------------------------------------------------------------------------
# HRNet


class HRNetStage(nn.Module):
    """Parallel branches followed by all-to-all multi-resolution fusion.

    Branch ``i`` runs at stride ``2**i`` relative to branch 0.  Lower
    resolutions reach higher ones through a 1x1 conv and nearest upsampling;
    higher reach lower through repeated stride-2 3x3 convs.  With
    ``new_branch`` the stage appends one branch at half the last resolution.
    """

    def __init__(self, channels: Sequence[int], num_blocks: int = 1, new_branch: int | None = None,
                 activation: bool = True, norm: str | None = "group"):
        super().__init__()
        self.channels = list(channels)
        self.activation = activation
        nb = len(channels)
        self.branches = nn.ModuleList(
            nn.Sequential(*[ResidualBlock(BlockConfig(c, c), norm=norm, activation=activation)
                            for _ in range(num_blocks)])
            for c in channels)
        self.fuse = nn.ModuleList()
        for j in range(nb):
            row = nn.ModuleList()
            for i in range(nb):
                if i == j:
                    row.append(nn.Identity())
                elif i > j:
                    row.append(nn.Conv2d(channels[i], channels[j], 1, bias=False))
                else:
                    steps = []
                    for k in range(j - i):
                        last = k == j - i - 1
                        steps.append(nn.Conv2d(channels[i], channels[j] if last else channels[i],
                                               3, 2, 1, bias=False))
                        if not last and activation:
                            steps.append(nn.ReLU())
                    row.append(nn.Sequential(*steps))
            self.fuse.append(row)
        self.transition = None
        if new_branch is not None:
            self.transition = nn.Conv2d(channels[-1], new_branch, 3, 2, 1, bias=False)

    def forward(self, branches: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(branches) != len(self.branches):
            raise ShapeError(f"expected {len(self.branches)} branches, got {len(branches)}")
        h0, w0 = branches[0].shape[-2:]
        for i, b in enumerate(branches):
            if b.shape[1] != self.channels[i]:
                raise ShapeError(f"branch {i}: expected {self.channels[i]} channels, got {b.shape[1]}")
            if b.shape[-2:] != (math.ceil(h0 / 2 ** i), math.ceil(w0 / 2 ** i)):
                raise ShapeError(f"branch {i} is not at stride {2 ** i} relative to branch 0")
        xs = [blk(b) for blk, b in zip(self.branches, branches)]
        out = []
        for j, row in enumerate(self.fuse):
            acc = xs[j]
            for i, path in enumerate(row):
                if i == j:
                    continue
                y = path(xs[i])
                if i > j:
                    y = F.interpolate(y, size=xs[j].shape[-2:], mode="nearest")
                acc = acc + y
            out.append(F.relu(acc) if self.activation else acc)
        if self.transition is not None:
            nxt = self.transition(out[-1])
            out.append(F.relu(nxt) if self.activation else nxt)
        return out


def hrnet_stage(branches: Sequence[torch.Tensor], seed: int = 0, **kwargs) -> list[torch.Tensor]:
    stage = seeded_init(HRNetStage([b.shape[1] for b in branches], **kwargs), seed)
    return stage.to(branches[0].dtype)(branches)


# ---------------------------------------------------------------------------
# ROI pooling


def _interp_matrix(start, size, n_out: int, length: int, sampling: int):
    """Rows average ``sampling`` bilinear taps per output bin along one axis.

    Returns (K, n_out, length).  Sample coordinates follow the half-pixel
    convention: feature cell ``i`` covers [i, i + 1) with its value at i + 0.5.
    """
    k = start.shape[0]
    bins = torch.arange(n_out, dtype=start.dtype, device=start.device)
    taps = (torch.arange(sampling, dtype=start.dtype, device=start.device) + 0.5) / sampling
    offs = (bins[:, None] + taps[None, :]).reshape(-1)  # (n_out * sampling,)
    coord = start[:, None] + offs[None, :] * (size / n_out)[:, None] - 0.5
    valid = (coord >= -1.0) & (coord <= length)
    coord = coord.clamp(min=0.0)
    lo = coord.floor().long()
    at_edge = lo >= length - 1
    lo = torch.where(at_edge, torch.full_like(lo, length - 1), lo)
    hi = torch.where(at_edge, lo, lo + 1)
    frac = torch.where(at_edge, torch.zeros_like(coord), coord - lo.to(coord.dtype))
    w = (F.one_hot(lo, length).to(coord.dtype) * (1 - frac)[..., None]
         + F.one_hot(hi, length).to(coord.dtype) * frac[..., None])
    w = w * valid[..., None].to(coord.dtype)
    return w.reshape(k, n_out, sampling, length).mean(dim=2)


def roi_align(features: torch.Tensor, boxes: torch.Tensor, out_size: tuple[int, int],
              batch_index: torch.Tensor | None = None, sampling: int = 2) -> torch.Tensor:
    """Quantization-free ROI pooling.

    ``features`` is (N, C, H, W) or (C, H, W); ``boxes`` is (K, 4) normalized.
    Each output bin averages ``sampling x sampling`` bilinear samples.
    Returns (K, C, out_h, out_w) (or (C, out_h, out_w) for a single 1-D box).
    """
    single = boxes.dim() == 1
    boxes = boxes.reshape(-1, 4).to(features.dtype)
    feats = features if features.dim() == 4 else features[None]
    if batch_index is None:
        batch_index = torch.zeros(len(boxes), dtype=torch.long, device=boxes.device)
    if len(boxes) and not bool(((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])).all()):
        raise ValueError("ROI boxes must have positive area")
    n, c, h, w = feats.shape
    oh, ow = out_size
    out = feats.new_zeros((len(boxes), c, oh, ow))
    if len(boxes) == 0:
        return out
    x1, y1 = boxes[:, 0] * w, boxes[:, 1] * h
    bw, bh = (boxes[:, 2] - boxes[:, 0]) * w, (boxes[:, 3] - boxes[:, 1]) * h
    ay = _interp_matrix(y1, bh, oh, h, sampling)
    ax = _interp_matrix(x1, bw, ow, w, sampling)
    parts = []
    for b in range(n):
        sel = (batch_index == b).nonzero(as_tuple=True)[0]
        if sel.numel() == 0:
            continue
        t = torch.einsum("kyh,chw->kcyw", ay[sel], feats[b])
        parts.append((sel, torch.einsum("kcyw,kxw->kcyx", t, ax[sel])))
    out = out.index_put((torch.cat([s for s, _ in parts]),), torch.cat([p for _, p in parts]))
    return out[0] if single else out


def adaptive_feature_pooling(boxes: torch.Tensor, levels: Sequence[torch.Tensor],
                             out_size: tuple[int, int], batch_index: torch.Tensor | None = None,
                             sampling: int = 2) -> torch.Tensor:
    """ROI-align each box against every level and fuse by element-wise maximum."""
    if not levels:
        raise ValueError("adaptive pooling needs at least one level")
    pooled = [roi_align(f, boxes, out_size, batch_index, sampling) for f in levels]
    return torch.stack(pooled).amax(dim=0)
