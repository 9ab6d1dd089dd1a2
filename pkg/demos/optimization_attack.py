"""Gradient-matching attack on an MLP with a learnable input bias.

The attacker starts from noise and climbs the cosine similarity between the
gradient its guess produces and the shared gradient.  Masking a fraction R
of the shared scalars makes the matched target wrong in proportion.
"""

import numpy as np

from flrsp.attacks import AttackConfig, intercept, optimization_attack
from flrsp.data import synthetic
from flrsp.metrics import ssim
from flrsp.models import MlpSpec, build_mlp

graph, params = build_mlp(MlpSpec(64, (32,), 3, input_shape=(1, 8, 8)), seed=0)
data = synthetic(3, 10, (1, 8, 8), seed=2)
x, y = data.images[0], data.labels[0]
cfg = AttackConfig(iterations=600, step_size=0.01)

for R in (0.0, 0.5, 0.9):
    defense = {"type": "flrsp", "R": R} if R else {"type": "none"}
    rec = intercept(graph, params, x, y, defense)
    result = optimization_attack(rec, graph, cfg)
    print(f"R={R:.1f}  similarity {result.similarity:.4f}  SSIM {ssim(result.image, x): .3f}")

# the input-bias gradient copies the input gradient exactly
graph.forward(params, x, y)
grads = graph.backward()
print("bias identity error:", np.max(np.abs(grads["b"] - graph.input_gradient().ravel())))
