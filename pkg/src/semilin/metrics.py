"""Error measures reported by both solvers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


def rel_error_y0(y0, y0_ref):
    return abs(y0 - y0_ref) / abs(y0_ref)


def rel_error_z0(z0, z0_ref):
    """Ratio of squared norms. A zero reference gives the plain squared norm."""
    z0, z0_ref = np.asarray(z0, dtype=float), np.asarray(z0_ref, dtype=float)
    num = float(np.sum((z0 - z0_ref) ** 2))
    den = float(np.sum(z0_ref**2))
    return num / den if den > 0 else num


def _trapezoid_mean(err, dt):
    """E[dt ((e_0 + e_N) / 2 + sum_{0<i<N} e_i)] for err of shape (paths, N+1)."""
    per_path = dt * (0.5 * (err[:, 0] + err[:, -1]) + err[:, 1:-1].sum(axis=1))
    return float(per_path.mean())


def integral_error_y(Y, Y_ref, dt):
    return _trapezoid_mean(np.abs(np.asarray(Y) - np.asarray(Y_ref)), dt)


def integral_error_z(Z, Z_ref, dt):
    return _trapezoid_mean(np.sum((np.asarray(Z) - np.asarray(Z_ref)) ** 2, axis=-1), dt)


@dataclass
class ErrorReport:
    y0: float = math.nan
    y0_ref: float = math.nan
    rel_y0: float = math.nan
    z0: list = field(default_factory=list)
    z0_ref: list = field(default_factory=list)
    rel_z0: float = math.nan
    int_y: float = math.nan
    int_z: float = math.nan
    final_test_loss: float = math.nan
    best_iteration: int = -1
    reference: str = ""

    FIELDS = ("y0", "y0_ref", "rel_y0", "rel_z0", "int_y", "int_z", "final_test_loss", "best_iteration", "reference")

    def to_json(self):
        return asdict(self)

    def row(self):
        return {k: getattr(self, k) for k in self.FIELDS}
