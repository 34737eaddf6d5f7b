"""
Synthetic light and dark road scenes
====================================

Each scene's geometry is drawn from its own seed, separately from its
appearance.  Rendering the same index with the "dark" look gives the same
lanes under a gamma 2.2 / 0.35 brightness / noisy exposure, which is what
makes generated dark images inherit the bright image's labels for free.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from lightaug import datasets as ds

bright = ds.SyntheticSceneConfig(light_domain="bright", seed=7)
dark = ds.SyntheticSceneConfig(light_domain="dark", seed=7)

fig, axes = plt.subplots(3, 4, figsize=(12, 5))
for col in range(4):
    a, b = ds.render_scene(bright, col), ds.render_scene(dark, col)
    mask = ds.seg_mask(a.lanes, *bright.canvas, bright.seg_width)
    axes[0, col].imshow(a.image)
    axes[1, col].imshow(np.clip(b.image * 3, 0, 1))  # brightened x3 for display
    axes[2, col].imshow(mask, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
    same = all((p is None and q is None) or np.array_equal(p, q) for p, q in zip(a.lanes, b.lanes))
    axes[0, col].set_title(f"scene {col}: geometry shared = {same}", fontsize=8)
for ax in axes.flat:
    ax.set_axis_off()
fig.tight_layout()
fig.savefig("synthetic_scenes.png", dpi=100)

##############################################################################
# Mean luminance over 64 scenes per domain.

lum = {name: np.mean([ds.render_scene(cfg, i).image.mean() for i in range(64)])
       for name, cfg in [("bright", bright), ("dark", dark)]}
print(lum)

##############################################################################
# Annotations are CULane ``.lines.txt``: one lane per line, ``x y`` pairs.

scene = ds.render_scene(bright, 0)
print(ds.format_lines([p for p in scene.lanes if p is not None])[:160], "...")
