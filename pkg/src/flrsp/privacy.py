"""Comparison defenses: Gaussian noise on shared updates, and freezing of
the ViT positional embedding ("fixed-position")."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import ParamSet

POSITIONAL_EMBEDDING = "E_pos"


def dp_sigma(epsilon: float, delta: float) -> float:
    """Smallest noise multiplier allowed by ``sigma >= sqrt(2 ln(1.25/delta)) / epsilon``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1.25:
        raise ValueError(f"delta must lie in (0, 1.25), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class DpConfig:
    epsilon: float
    delta: float = 0.5
    sensitivity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.sensitivity < 0:
            raise ValueError("sensitivity must be non-negative")
        dp_sigma(self.epsilon, self.delta)

    @property
    def sigma(self) -> float:
        return dp_sigma(self.epsilon, self.delta)

    @property
    def noise_std(self) -> float:
        return self.sensitivity * self.sigma


def dp_noise(update: ParamSet, cfg: DpConfig, rng=None) -> ParamSet:
    """Add i.i.d. N(0, (S_f * sigma)^2) to every scalar of ``update``.

    No clipping happens first. ``rng`` overrides the generator seeded from
    ``cfg.seed``.
    """
    std = cfg.noise_std
    if std == 0:
        return update.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return ParamSet({k: v + rng.normal(0.0, std, size=v.shape) for k, v in update.items()}, copy=False)


def fixed_position_filter(update: ParamSet, model) -> ParamSet:
    """Zero the positional-embedding entries of a gradient or parameter delta."""
    from .models import VitSpec

    if not isinstance(model, VitSpec):
        raise ValueError("the fixed-position filter applies only to ViT models")
    if POSITIONAL_EMBEDDING not in update:
        raise ValueError(f"update has no {POSITIONAL_EMBEDDING!r} tensor")
    out = update.copy()
    out[POSITIONAL_EMBEDDING] = np.zeros_like(out[POSITIONAL_EMBEDDING])
    return out
