"""Private online quantile tracking for clipping thresholds.

Each group keeps its own threshold and nudges it geometrically toward the
target quantile of its per-example gradient norms, using a noisy count of the
examples that were not clipped. The noise draw is supplied by the caller so
the update itself is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class QuantileEstimator:
    C: float
    q: float
    eta: float
    sigma_b: float
    batch_size: float

    def __post_init__(self):
        if not self.C > 0:
            raise InputError(f"threshold must be positive, got {self.C}")
        if not 0 < self.q < 1:
            raise InputError(f"target quantile must lie in (0, 1), got {self.q}")
        if not self.eta > 0:
            raise InputError(f"quantile learning rate must be positive, got {self.eta}")
        if self.sigma_b < 0 or not self.batch_size > 0:
            raise InputError("sigma_b must be >= 0 and batch_size > 0")

    def step(self, count: int, z: float) -> "QuantileEstimator":
        return replace(self, C=update(self, count, z))


def count_below(norms, C: float) -> int:
    """Number of norms at or below ``C`` (ties count as unclipped)."""
    return int(np.count_nonzero(np.asarray(norms, dtype=np.float64) <= C))


def update(est: QuantileEstimator, count: int, z: float) -> float:
    """New threshold C * exp(-eta * ((count + z) / B - q))."""
    frac = (count + z) / est.batch_size
    return est.C * math.exp(-est.eta * (frac - est.q))
