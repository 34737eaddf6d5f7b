"""
The desk experiment end to end
==============================

Bright synthetic scenes with labels, a small pool of unlabeled dark scenes,
and a held-out test set with Normal, Night and lane-free Crossroad frames.
The translator learns bright -> dark from the two unpaired pools, converts
the labeled training images, and a detector trained on both is compared
with one trained on bright images only.

About 20 minutes on one CPU core.  Pass an output directory as the first
argument (default ``runs/desk_demo``).
"""

import sys
import time
from pathlib import Path

import torch

from lightaug import config as C
from lightaug import datasets as ds
from lightaug import experiments as X

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk_demo")
cfg = C.build_config("desk")
X.set_threads(1)
torch.use_deterministic_algorithms(True)
t0 = time.time()

##############################################################################
# Data.  Geometry and lighting are seeded separately, so test Night frames are
# new layouts, not dark copies of training frames.

lay = X.prepare_synthetic(cfg, out / "data")
real = ds.load_train_list(lay.train, cfg["data"]["num_lanes"])
val = ds.load_train_list(lay.val, cfg["data"]["num_lanes"])
print(f"{len(real)} bright training scenes, {len(val)} validation")

##############################################################################
# Translator.  One image per step, 40 epochs over 64 + 64 images.

ckpt = X.train_gan(cfg, lay.gan_bright, lay.gan_dark, out / "gan")
manifest = X.run_transfer(ckpt, lay.train, out / "transfer", cfg["data"]["num_lanes"])
print(f"translated {len(manifest.converted)} images  ({time.time() - t0:.0f}s so far)")

##############################################################################
# Baseline vs augmented with N = 1, five seeds.

results = X.compare_arms(cfg, cfg["compare"]["seeds"], real, val, manifest,
                         lay.test_root, lay.category_index, out / "compare")
print(f"{'seed':>4} {'Night base':>11} {'Night aug':>10} {'Normal base':>12} {'Normal aug':>11}")
for r in results:
    nb, na = r.f1("Night")
    mb, ma = r.f1("Normal")
    print(f"{r.seed:>4} {100 * nb:>11.1f} {100 * na:>10.1f} {100 * mb:>12.1f} {100 * ma:>11.1f}")

##############################################################################
# The ratio sweep reuses the same translated pool.

reports = X.ablate_ratio(cfg, [0.25, 1, 4], real, val, manifest, lay.test_root,
                         lay.category_index, out / "ablate")
print((out / "ablate" / "grid.txt").read_text())
print(f"total {time.time() - t0:.0f}s")
