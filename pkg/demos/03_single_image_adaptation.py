"""Adapting to one test image.

A test image is copied 32 times and augmented into 32 view pairs. One SGD
step on their mean BYOL loss moves the feature extractor, projector and
predictor; the classifier head stays fixed. The image itself, not a view,
is then classified. The adapted weights are thrown away before the next
image.

    python demos/03_single_image_adaptation.py [steps]
"""

import sys

import numpy as np

from mt3 import adapt, data, nn, trainers

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
R = 16
model_cfg = nn.ModelConfig.toy(resolution=R)
print(f"meta-training for {steps} steps so the heads carry some signal ...")
state = trainers.train("mt3", data.synth_dataset(10, 100, R, seed=0), model_cfg,
                       trainers.MetaTrainConfig(max_steps=steps))
theta = state.params

test = data.synth_dataset(10, 2, R, seed=1)
noisy = data.corrupt_dataset(test, data.CorruptionSpec("gaussian-noise", {"sigma": 0.12}), seed=3)

x, y = noisy.images[0], int(noisy.labels[0])
pred, phi, trace = adapt.adapt_one(x, theta, model_cfg, rng=np.random.default_rng(0))
print(f"\nimage 0 (label {y}): prediction before {adapt.predict(theta, x, model_cfg)}, after {pred}")
print(f"mean BYOL over the 32 pairs: {trace.loss_before[0]:.4f} -> {trace.loss_after:.4f}")
print(f"pre-clip gradient norm {trace.grad_norm[0]:.3f}")
moved = {g: float(np.sqrt(sum(np.sum((phi[n].data - theta[n].data) ** 2) for n in theta.names([g]))))
         for g in "fhpq"}
print("parameter change per group:", {g: round(v, 5) for g, v in moved.items()})

rep = adapt.evaluate(noisy, theta, model_cfg, "mt3")
down = np.mean([r["loss_after"] < r["loss_before"] for r in rep["records"]])
print(f"\nover {rep['n']} noisy images: BYOL decreased on {100 * down:.0f}%, "
      f"accuracy {rep['pre_accuracy']:.3f} before adaptation, {rep['post_accuracy']:.3f} after")
