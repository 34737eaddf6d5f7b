"""
Keeping every resolution intact through the translator
======================================================

The generator halves the resolution twice and doubles it twice.  For a
295 x 820 frame the plain round trip would come back as 296 x 820, so the
encoder records each stage's size and the decoder crops or pads back to it.
"""

import numpy as np
import torch

from lightaug.imaging import crop_to_trace, pad_to_multiple
from lightaug.simcyclegan import (Discriminator, DiscriminatorConfig, Generator,
                                  GeneratorConfig, patch_map_shape, receptive_field)

##############################################################################
# Pad on the bottom/right with reflection, remember what was added, crop back.

img = np.random.default_rng(0).uniform(-1, 1, (295, 820, 3)).astype(np.float32)
padded, trace = pad_to_multiple(img, 4)
print("padded", padded.shape, "trace", trace)
back = crop_to_trace(padded, trace)
print("bit-exact round trip:", back.tobytes() == img.tobytes())

##############################################################################
# The generator applies the same idea at every stage.  Odd sizes survive.

torch.manual_seed(0)
gen = Generator(GeneratorConfig(base_channels=8, downsample_stages=2, residual_blocks=2)).eval()
for h, w in [(295, 820), (37, 61), (8, 9), (257, 100)]:
    with torch.no_grad():
        out = gen(torch.zeros(1, 3, h, w))
    print(f"{h:>4} x {w:<4} -> {tuple(out.shape[-2:])}")

##############################################################################
# The patch classifier: 4x4 kernels with strides 2, 2, 2, 1, 1.  Each output
# score sees a 70 x 70 window; neighbouring scores are 8 pixels apart.

disc = Discriminator(DiscriminatorConfig(base_channels=8))
print("receptive field, jump, offset:", receptive_field(3))
for size in (256, 70, 64):
    print(size, "->", patch_map_shape(size, size))

# At 64 px the window is taller than the frame, so the classifier judges the
# whole layout rather than local texture.  One strided layer gives a 16 px
# window, about the same fraction of a 64 px frame as 70 px is of 295.
print("n_layers=1:", receptive_field(1), patch_map_shape(64, 128, n_layers=1))
