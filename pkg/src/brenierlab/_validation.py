"""Input checks shared by the solvers."""

from __future__ import annotations

import numpy as np

from .fields import DensityPath
from .torus import TorusGrid


def check_same_grid(a: TorusGrid, b: TorusGrid):
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")


def check_density_path(rho: DensityPath, admissible: bool = True) -> DensityPath:
    if not isinstance(rho, DensityPath):
        raise TypeError(f"expected a DensityPath, got {type(rho).__name__}")
    if admissible and not rho.is_admissible(tol=1e-9):
        raise ValueError("density path must be uniform at t=0 and t=1")
    return rho


def check_lower_bound(frames, bound: float, what: str = "density"):
    m = float(np.min(frames))
    if m < bound - 1e-12:
        raise ValueError(f"{what} must be >= {bound} pointwise (min {m:.4f})")
    return m
