"""
Damage-state classification with a small residual network
=========================================================

Train the toy-depth classifier to separate damaged from undamaged images
and inspect its probability output.
"""
import numpy as np

from structdamage.classifier import (ClassifierTrainConfig, accuracy_on, build_classifier, classify,
                                     train_classifier)
from structdamage.dataset_io import SyntheticSpec, concat_datasets, generate_synthetic

# %%
# Five damaged and five clean images.  ``concat_datasets`` renumbers ids so
# the two halves do not collide.
damaged = generate_synthetic(SyntheticSpec(count=5, image_size=64, crack_density=2, spall_density=0.5), 5)
clean = generate_synthetic(SyntheticSpec(count=5, image_size=64, crack_density=0, spall_density=0), 6)
ds = concat_datasets(damaged, clean)
print([r.task_labels[2] for r in ds])  # 0 damaged, 1 undamaged

# %%
# Task 2 is the binary damage-state task.  Training uses SGD with momentum.
model = build_classifier(2, seed=0)
model, history = train_classifier(model, ds, cfg=ClassifierTrainConfig(epochs=60, batch_size=10), seed=0)
print("final loss %.4f" % history[-1]["loss"])
print("train accuracy:", accuracy_on(model, ds))

# %%
# ``classify`` accepts any image size; the output is a probability vector.
pred = classify(model, np.full((40, 30, 3), 128, np.uint8))
print(pred.probabilities, pred.probabilities.sum())
