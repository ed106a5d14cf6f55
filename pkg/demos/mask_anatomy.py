"""What the selector produces for one pair of clips.

An untrained selector and teacher are enough to show the shape of the two
mask kinds: temporal masks are constant inside each frame, spatial masks
vary inside a frame. The mask is written to disk and read back through the
same summary that ``svmix inspect`` prints.
"""
import tempfile
from pathlib import Path

import numpy as np

from svmix import experiment, formats
from svmix.config import ExperimentConfig
from svmix.data import generate
from svmix.mixing import apply_mask
from svmix.recognizer import Recognizer
from svmix.selector import Kind, VolumeSelector, select

cfg = ExperimentConfig(samples_per_class=2, val_per_class=1)
train_set, _ = generate(cfg.dataset_spec())
rng = np.random.default_rng(0)
teacher = Recognizer.create(cfg.recognizer_config(), rng)
selector = VolumeSelector.create(cfg.widths[-1], cfg.d_k, rng)

x_i, x_j = train_set.subset([0]), train_set.subset([4])
lam = 0.35
out = Path(tempfile.mkdtemp())

for kind in Kind:
    mask = select(x_i, x_j, lam, kind, selector, teacher)
    mixed = apply_mask(x_i, x_j, mask)
    w = mask.weights.data
    print(f"{kind.value}: mask shape {w.shape}, mean {w.mean():.3f} (lambda {lam})")
    print(f"  largest within-frame spread {np.ptp(w, axis=(2, 3)).max():.4f}")
    print(f"  soft label {np.round(mixed.soft_labels[0], 3)}")
    path = out / f"{kind.value}.mask"
    formats.save_mask_dump(path, w, mask.lam, kind.value)
    for line in experiment.inspect(path, out).lines():
        print("  " + line)

print(f"dumps and PGM grids in {out}")
