"""
Classify first, then segment
============================

The cascade runs the segmenter only on images the classifier calls
damaged.  Compare it with the segmenter alone using the image-level
correctness rule.
"""
import numpy as np

from structdamage.classifier import ClassPrediction
from structdamage.dataset_io import SyntheticSpec, concat_datasets, generate_synthetic, resize_image
from structdamage.evaluation import judge_cascade, judge_segmentation, percent, pipeline_accuracy
from structdamage.pipelines import cascaded_infer, segment_only
from structdamage.segmenter import SegTrainConfig, build_unet, segment, segmentation_pairs, train_unet

# %%
# A quickly trained segmenter.  The cascade hands it a 256x256 copy, so the
# wrapper below scales to the 64 px training size and back.
unet = build_unet(depth=2, base_channels=8, seed=0)
train = generate_synthetic(SyntheticSpec(count=6, image_size=64), seed=11)
unet, _ = train_unet(unet, segmentation_pairs(train), SegTrainConfig(learning_rate=0.5, epochs=40))


def seg(img):
    return resize_image(segment(unet, resize_image(img, (64, 64)))[0], img.shape[1::-1])


# %%
# Half the test images contain cracks, half are clean.  An image is judged
# correct if a predicted crack overlaps a true one, or if nothing is
# predicted on a clean image.
test = concat_datasets(generate_synthetic(SyntheticSpec(count=10, image_size=64), 12),
                       generate_synthetic(SyntheticSpec(count=10, image_size=64, crack_density=0,
                                                        spall_density=0), 13))
alone, gated = [], []
for rec in test:
    alone.append(judge_segmentation(segment_only(rec.pixels, seg), rec.masks(), image_id=rec.id))
    # A perfect gate: damaged -> class 0, clean -> class 1.
    verdict = ClassPrediction(np.array([1.0, 0.0]) if rec.has_damage else np.array([0.0, 1.0]))
    gated.append(judge_cascade(cascaded_infer(rec.pixels, verdict, seg, [0]), rec))

# %%
# Gating removes false positives on clean images, so accuracy cannot drop.
print("segmenter alone:", percent(pipeline_accuracy(alone)))
print("perfect gate:   ", percent(pipeline_accuracy(gated)))
