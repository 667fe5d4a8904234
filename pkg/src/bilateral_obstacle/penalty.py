"""The C^1 penalty family beta_delta and its derivatives.

All three functions are vectorized over ``r``.

    beta(r)   = (1/delta) * { 0       r >= 0
                            { -r^2    -1/2 <= r <= 0
                            { r + 1/4 r <= -1/2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PenaltyParams:
    delta: float

    def __post_init__(self):
        if not (self.delta > 0 and np.isfinite(self.delta)):
            raise ValueError(f"delta must be positive and finite, got {self.delta}")


def _delta(p) -> float:
    return p.delta if isinstance(p, PenaltyParams) else float(p)


def _out(val, r):
    return float(val) if np.ndim(r) == 0 else val


def beta(p: PenaltyParams | float, r):
    r = np.asarray(r, dtype=float)
    val = np.where(r >= 0, 0.0, np.where(r >= -0.5, -r * r, r + 0.25))
    return _out(val / _delta(p), r)


def beta_prime(p: PenaltyParams | float, r):
    r = np.asarray(r, dtype=float)
    val = np.where(r >= 0, 0.0, np.where(r >= -0.5, -2.0 * r, 1.0))
    return _out(val / _delta(p), r)


def beta_second(p: PenaltyParams | float, r):
    # kinks: middle branch on (-1/2, 0], zero elsewhere
    r = np.asarray(r, dtype=float)
    val = np.where((r > -0.5) & (r <= 0), -2.0, 0.0)
    return _out(val / _delta(p), r)
