"""
Mask R-CNN variants
===================

Build each detector variant, count its parameters, and train the
path-augmented one briefly on spalling images.
"""
import torch

from structdamage.dataset_io import SyntheticSpec, generate_synthetic
from structdamage.detector import (DetectorTrainConfig, box_iou, build_detector, detect,
                                   train_detector)

# %%
# Variants differ in the neck (plain FPN, bottom-up path augmentation with
# attention, HRNet) and in the number of box heads (cascades use three).
for kind in ("vanilla", "apanet", "hrnet", "cascade_b", "cascade_c", "cascade_d"):
    model = build_detector(kind, seed=0)
    n = sum(p.numel() for p in model.parameters())
    print(f"{kind:10s} {n:>9,d} parameters, {len(model.box_heads)} box head(s)")

# %%
# Overfit a handful of spalling images.  One image per SGD step.
ds = generate_synthetic(SyntheticSpec(count=3, image_size=96, crack_density=0, spall_density=1), seed=1)
model = build_detector("apanet", seed=0)
model, history = train_detector(model, ds, DetectorTrainConfig(epochs=40))
print("loss %.3f -> %.3f" % (history[0]["loss"], history[-1]["loss"]))

# %%
# Detections carry a box, category, score and a full-resolution mask.
for rec in ds:
    gt = torch.tensor([a.bbox() for a in rec.annotations], dtype=torch.float32)
    for d in detect(model, rec.pixels, 0.5):
        iou = float(box_iou(torch.tensor([d.box], dtype=torch.float32), gt).max())
        print(rec.id, d.category, "score %.2f" % d.score, "IoU %.2f" % iou, int(d.mask.sum()), "px")
