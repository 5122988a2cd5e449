"""Residual-network image classifier for the eight damage classification tasks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .dataset_io import LabeledDataset, TaskSchema, resize_image, task_schema
from .nn_blocks import BlockConfig, BottleneckBlock, ResidualBlock, make_norm, seeded_init

INPUT_SIZE = 224

# depth -> (block kind, blocks per stage, stage widths, stem width)
DEPTHS = {
    "toy": ("basic", (1, 1, 1), (16, 32, 64), 16),
    18: ("basic", (2, 2, 2, 2), (64, 128, 256, 512), 64),
    50: ("bottleneck", (3, 4, 6, 3), (256, 512, 1024, 2048), 64),
    152: ("bottleneck", (3, 8, 36, 3), (256, 512, 1024, 2048), 64),
}


class DataError(ValueError):
    pass


@dataclass
class ClassifierTrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 40
    epochs: int = 100
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class ClassPrediction:
    probabilities: np.ndarray
    argmax: int = field(init=False)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.argmax = int(np.argmax(self.probabilities))


class ResNetBackbone(nn.Module):
    def __init__(self, depth="toy", norm: str | None = "group"):
        super().__init__()
        kind, blocks, widths, stem = DEPTHS[depth]
        self.stem = nn.Sequential(nn.Conv2d(3, stem, 7, 2, 3, bias=False), nn.MaxPool2d(3, 2, 1))
        stages, cin = [], stem
        for i, (n, cout) in enumerate(zip(blocks, widths)):
            layers = []
            for b in range(n):
                cfg = BlockConfig(cin, cout, 2 if (b == 0 and i > 0) else 1)
                layers.append(ResidualBlock(cfg, norm) if kind == "basic" else BottleneckBlock(cfg, norm))
                cin = cout
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)
        self.post = nn.Sequential(make_norm(norm, cin), nn.ReLU())
        self.out_channels = cin

    def forward(self, x):
        return self.post(self.stages(self.stem(x)))


class ClassifierModel(nn.Module):
    def __init__(self, task: TaskSchema, depth="toy"):
        super().__init__()
        self.task = task
        self.depth = depth
        self.backbone = ResNetBackbone(depth)
        self.head = nn.Linear(self.backbone.out_channels, task.num_classes)

    @property
    def num_classes(self) -> int:
        return self.task.num_classes

    def forward(self, x):
        feats = self.backbone(x)
        return self.head(feats.mean(dim=(2, 3)))


def build_classifier(task: TaskSchema | int, depth="toy", pretrained=None, seed: int = 0) -> ClassifierModel:
    """Seeded classifier with a head sized to ``task``.

    ``pretrained`` (a checkpoint path or a name->array mapping) supplies
    backbone weights only; the head is always freshly initialized.
    """
    if isinstance(task, int):
        task = task_schema(task)
    if depth not in DEPTHS:
        raise ValueError(f"unsupported depth {depth!r}; choose from {list(DEPTHS)}")
    model = seeded_init(ClassifierModel(task, depth), seed)
    if pretrained is not None:
        tensors = pretrained if isinstance(pretrained, Mapping) else checkpoint.load(pretrained)[0]
        checkpoint.load_into(model.backbone, tensors, prefix="backbone.", strict=True)
    return model


def preprocess(img: np.ndarray) -> torch.Tensor:
    """8-bit RGB raster -> (3, 224, 224) float tensor in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        arr = resize_image(arr, (INPUT_SIZE, INPUT_SIZE))
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def classify(model: ClassifierModel, img: np.ndarray) -> ClassPrediction:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        logits = model(preprocess(img)[None].to(dtype))[0]
        probs = torch.softmax(logits.double(), dim=0)
    return ClassPrediction(probs.numpy())


def train_classifier(model: ClassifierModel, data: LabeledDataset, task: int | None = None,
                     cfg: ClassifierTrainConfig | None = None, seed: int = 0):
    """Momentum SGD on mean cross-entropy.

    Returns ``(model, history)`` where history has one
    ``{"epoch", "loss", "train_acc"}`` dict per epoch.
    """
    cfg = cfg or ClassifierTrainConfig()
    task = model.task.task_id if task is None else task
    labels = []
    for rec in data.records:
        if task not in rec.task_labels:
            raise DataError(f"record {rec.id} has no label for task {task}")
        if rec.pixels is None:
            raise DataError(f"record {rec.id} has no pixels loaded")
        labels.append(rec.task_labels[task])
    dtype = next(model.parameters()).dtype
    x_all = torch.stack([preprocess(r.pixels) for r in data.records]).to(dtype)
    y_all = torch.tensor(labels, dtype=torch.long)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(int(seed))
    history = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(len(y_all), generator=gen)
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y_all[idx]).sum())
        history.append({"epoch": epoch, "loss": total / len(y_all), "train_acc": correct / len(y_all)})
    model.eval()
    return model, history


def accuracy_on(model: ClassifierModel, data: LabeledDataset, task: int | None = None) -> float:
    task = model.task.task_id if task is None else task
    hits = sum(classify(model, r.pixels).argmax == r.task_labels[task] for r in data.records)
    return hits / len(data.records)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "train_acc"])
    for row in history:
        writer.writerow([row["epoch"], f"{row['loss']:.8f}", f"{row['train_acc']:.6f}"])
    return buf.getvalue()


def save_classifier(path: str | Path, model: ClassifierModel) -> Path:
    meta = {"kind": "classifier", "task_id": model.task.task_id,
            "class_names": list(model.task.class_names), "depth": model.depth}
    return checkpoint.save_module(path, model, meta)


def load_classifier(path: str | Path) -> ClassifierModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "classifier":
        raise checkpoint.CheckpointError(f"{path} is not a classifier checkpoint")
    depth = meta["depth"] if meta["depth"] == "toy" else int(meta["depth"])
    model = ClassifierModel(task_schema(meta["task_id"], meta["class_names"]), depth)
    checkpoint.load_into(model, tensors)
    return model.eval()
