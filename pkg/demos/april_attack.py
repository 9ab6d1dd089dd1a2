"""Closed-form recovery of a ViT input from its shared gradient.

The positional-embedding gradient equals the gradient w.r.t. the first
token matrix, which turns the attention weight gradients into a linear
system for the embedded input.  Zeroing the positional gradient, or masking
random scalars, breaks that system.
"""

import numpy as np

from flrsp.attacks import april_reconstruct, intercept
from flrsp.data import synthetic
from flrsp.metrics import ssim
from flrsp.models import VitSpec, build_vit

spec = VitSpec((1, 8, 8), 4, 16, 16, 3)
graph, params = build_vit(spec, seed=0)
data = synthetic(3, 20, (1, 8, 8), seed=1)

defenses = {
    "none": {"type": "none"},
    "fixed position": {"type": "fixed_position"},
    "mask R=0.2": {"type": "flrsp", "R": 0.2},
    "mask R=0.8": {"type": "flrsp", "R": 0.8},
}
for name, defense in defenses.items():
    scores = []
    for i in range(10):
        rec = intercept(graph, params, data.images[i], data.labels[i], defense, client=i)
        result = april_reconstruct(rec, spec)
        scores.append(ssim(result.image, data.images[i]))
    print(f"{name:15s} median SSIM {np.median(scores): .3f}")
