"""
Crack segmentation with a U-Net
===============================

Fit a shallow U-Net to crack masks and measure intersection over union.
"""
import numpy as np

from structdamage.dataset_io import SyntheticSpec, generate_synthetic
from structdamage.segmenter import (SegTrainConfig, binarize, build_unet, mask_iou, segment,
                                    segmentation_pairs, train_unet)

# %%
# Pairs are (image, stacked category masks).  Only cracks here.
ds = generate_synthetic(SyntheticSpec(count=6, image_size=64), seed=3)
pairs = segmentation_pairs(ds)
print(pairs[0][0].shape, pairs[0][1].shape)

# %%
# Depth 2 and 8 base channels is enough at this size.  Full-batch gradient
# descent with a large step converges quickly on so few images.
model = build_unet(depth=2, base_channels=8, seed=0)
print("encoder channels:", model.encoder_channels)
model, history = train_unet(model, pairs, SegTrainConfig(learning_rate=0.5, epochs=60))
print("loss %.3f -> %.3f" % (history[0]["loss"], history[-1]["loss"]))

# %%
# Probability maps come back at input resolution; threshold at 0.5.
ious = [mask_iou(binarize(segment(model, img))[0], m[0]) for img, m in pairs]
print("IoU per image:", np.round(ious, 3))
