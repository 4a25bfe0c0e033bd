"""Meta-training the toy network on synthetic textures.

Each meta-batch holds 4 tasks of 8 images. For each task the network takes
one BYOL gradient step on two augmented views per image, and the outer loss
(cross-entropy plus 0.1 BYOL) is measured with the adapted weights. The log
prints task accuracy under the meta-weights and under the adapted weights.

    python demos/02_meta_train_toy.py [steps]
"""

import sys
import time

import numpy as np

from mt3 import adapt, data, nn, trainers

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
R = 16

train_set = data.synth_dataset(10, 100, R, seed=0)
model_cfg = nn.ModelConfig.toy(resolution=R)
cfg = trainers.MetaTrainConfig(max_steps=steps, seed=0)
print(f"{len(train_set)} training images, {nn.init_params(model_cfg).num_values()} parameters, "
      f"{steps} meta-batches")

window = []
t0 = time.time()


def on_record(rec):
    window.append(rec)
    if len(window) == 50:
        mean = {k: np.mean([r[k] for r in window]) for k in ("loss_ce", "loss_byol", "acc_before",
                                                             "acc_after")}
        print(f"step {rec['step'] + 1:5d}  ce {mean['loss_ce']:.3f}  byol {mean['loss_byol']:.3f}  "
              f"acc before {mean['acc_before']:.3f}  after {mean['acc_after']:.3f}  "
              f"({time.time() - t0:.0f}s)")
        window.clear()


state = trainers.train("mt3", train_set, model_cfg, cfg, on_record=on_record)

# evaluate: plain forward (mt) against per-image adaptation (mt3) on a shifted test set
test = data.synth_dataset(10, 5, R, seed=1)
shifted = data.corrupt_dataset(test, data.CorruptionSpec("contrast", {"factor": 0.4}))
for regime in ("mt", "mt3"):
    rep = adapt.evaluate(shifted, state.params, model_cfg, regime)
    print(f"{regime:4s} accuracy on {shifted.name}: {rep['accuracy']:.3f}")
