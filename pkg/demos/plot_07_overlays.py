"""
Drawing predictions over images
===============================

Render masks and boxes in a palette, optionally as a three-panel strip.
"""
import numpy as np

from structdamage.dataset_io import SyntheticSpec, generate_synthetic, write_image
from structdamage.detector import Detection
from structdamage.pipelines import DetectionResult, render_overlay

# %%
# Use the ground truth as a stand-in prediction.
rec = generate_synthetic(SyntheticSpec(count=1, image_size=96, crack_density=1, spall_density=1), 4)[0]
dets = [Detection(a.category, 1.0, a.bbox(), m) for a, m in zip(rec.annotations, rec.masks())]
result = DetectionResult(rec.id, dets)

# %%
# Only pixels under a mask or a box outline change colour.
out = render_overlay(rec.pixels, result, palette="cascade", alpha=0.6)
print("changed pixels:", int((out != rec.pixels).any(axis=-1).sum()))

# %%
# Panels place the original, the prediction on a plain background and the
# overlay side by side.
strip = render_overlay(rec.pixels, result, palette="detections", panels=True)
print(strip.shape)
write_image("overlay_demo.png", np.asarray(strip, np.uint8))
