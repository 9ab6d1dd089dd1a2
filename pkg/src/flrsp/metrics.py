"""Classification accuracy and global-statistics SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SsimParams:
    """Stabilizers ``C1 = (k1 L)^2`` and ``C2 = (k2 L)^2`` for dynamic range ``L``."""

    C1: float = 1e-4
    C2: float = 9e-4
    L: float = 1.0

    def __post_init__(self):
        if self.C1 <= 0 or self.C2 <= 0:
            raise ValueError("SSIM constants must be positive")

    @classmethod
    def for_range(cls, L: float = 1.0) -> SsimParams:
        return cls((0.01 * L) ** 2, (0.03 * L) ** 2, L)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(predictions == labels)) / predictions.size


def _ssim_channel(a, b, C1, C2):
    # population statistics over the whole channel, no sliding window
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return num / den


def ssim(x1, x2, params: SsimParams | None = None) -> float:
    """SSIM from whole-image means, variances and covariance.

    Arrays shaped ``(C, H, W)`` are scored per channel and averaged; any
    other shape is treated as a single channel.
    """
    p = params or SsimParams()
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x1.shape} vs {x2.shape}")
    if not (np.isfinite(x1).all() and np.isfinite(x2).all()):
        raise ValueError("SSIM inputs must be finite")
    if x1.ndim == 3:
        vals = [_ssim_channel(a.ravel(), b.ravel(), p.C1, p.C2) for a, b in zip(x1, x2)]
        return float(np.mean(vals))
    return float(_ssim_channel(x1.ravel(), x2.ravel(), p.C1, p.C2))
