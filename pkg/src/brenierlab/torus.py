"""Torus geometry: uniform grids on the flat torus, minimal-image arithmetic
and the compactly supported mollifier family."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TIE_SLACK = 1e-9


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid of ``cells_per_dim**dim`` cells on ``[0, 1)^dim``.

    Cell ``k`` along an axis has center ``k / n``. Flat cell indices are
    row-major over axes.
    """

    dim: int
    cells_per_dim: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.cells_per_dim < 2:
            raise ValueError(f"cells_per_dim must be >= 2, got {self.cells_per_dim}")

    @property
    def n(self) -> int:
        return self.cells_per_dim

    @property
    def spacing(self) -> float:
        return 1.0 / self.cells_per_dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cells_per_dim,) * self.dim

    @property
    def size(self) -> int:
        return self.cells_per_dim**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """Array of shape ``(size, dim)``, row-major."""
        axes = [np.arange(self.n) / self.n] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_index(self, points) -> np.ndarray:
        """Flat index of the nearest cell center for each point (last axis = dim)."""
        points = np.asarray(points, dtype=float)
        if points.shape[-1] != self.dim:
            raise ValueError(f"points have dim {points.shape[-1]}, grid has {self.dim}")
        # round half up (not half to even) so a common shift of all centers stays a
        # bijection; the slack absorbs representation error in exact ties
        k = np.floor(points * self.n + 0.5 + TIE_SLACK).astype(np.int64) % self.n
        if self.dim == 1:
            return k[..., 0]
        return k[..., 0] * self.n + k[..., 1]

    def uniform(self) -> np.ndarray:
        """Uniform density (value 1 in every cell)."""
        return np.ones(self.shape)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "cells_per_dim": self.cells_per_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "TorusGrid":
        return cls(int(d["dim"]), int(d["cells_per_dim"]))


def _as_point(p, dim: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.shape[-1] != dim:
        raise ValueError(f"point dimension {p.shape[-1]} does not match grid dimension {dim}")
    return p


def min_image_disp(a, b) -> np.ndarray:
    """Representative of ``b - a`` in ``[-1/2, 1/2)`` per axis (broadcasts)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim and b.ndim and a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = b - a
    return d - np.floor(d + 0.5)


def geodesic_dist(a, b, grid: TorusGrid | None = None):
    """Geodesic distance on the flat torus.

    Per-axis minimal-image distance ``min(|a-b|, 1-|a-b|)`` combined in
    Euclidean norm. Accepts batched points along leading axes.
    """
    if grid is not None:
        a = _as_point(a, grid.dim)
        b = _as_point(b, grid.dim)
    d = min_image_disp(a, b)
    out = np.sqrt(np.sum(d * d, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def squared_distance_matrix(grid: TorusGrid) -> np.ndarray:
    """Matrix of squared geodesic distances between all pairs of cell centers."""
    c = grid.cell_centers
    d = min_image_disp(c[:, None, :], c[None, :, :])
    return np.sum(d * d, axis=-1)


def bump_profile(u) -> np.ndarray:
    """One-dimensional C-infinity bump supported on ``(-1/4, 1/4)`` (unnormalized)."""
    u = np.asarray(u, dtype=float)
    z = 4.0 * u
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


@dataclass(frozen=True)
class Mollifier:
    """Rescaled bump ``psi_eps(v) = psi(v / eps) / eps^dim`` sampled on a grid.

    ``psi`` is the tensor product of :func:`bump_profile`, so ``psi_eps`` is
    supported in ``[-eps/4, eps/4]^dim``. The sampled weights are renormalized
    to sum to exactly one; when ``eps / 4`` is below the grid spacing the
    kernel collapses to the identity (a single unit weight).
    """

    epsilon: float
    grid: TorusGrid
    offsets: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 0.25):
            raise ValueError(f"epsilon must lie in (0, 1/4], got {self.epsilon}")
        h, dim = self.grid.spacing, self.grid.dim
        kmax = int(np.floor(self.epsilon / 4.0 / h))
        ks = np.arange(-kmax, kmax + 1)
        w1 = bump_profile(ks * h / self.epsilon)
        if w1.sum() <= 0.0:
            ks, w1 = np.array([0]), np.array([1.0])
        keep = w1 > 0
        ks, w1 = ks[keep], w1[keep]
        mesh = np.meshgrid(*([ks] * dim), indexing="ij")
        offsets = np.stack([m.ravel() for m in mesh], axis=-1)
        wmesh = np.meshgrid(*([w1] * dim), indexing="ij")
        w = np.prod(np.stack([m.ravel() for m in wmesh]), axis=0)
        object.__setattr__(self, "offsets", offsets.astype(np.int64))
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def support_radius(self) -> float:
        return self.epsilon / 4.0

    @property
    def is_identity(self) -> bool:
        return len(self.weights) == 1

    def shifts(self) -> np.ndarray:
        """Kernel offsets as displacement vectors, shape ``(k, dim)``."""
        return self.offsets * self.grid.spacing

    def second_moment(self) -> float:
        """Discrete ``sum |v|^2 w(v)``."""
        v = self.shifts()
        return float(np.sum(self.weights * np.sum(v * v, axis=-1)))

    def __call__(self, v) -> np.ndarray:
        """Continuum kernel value ``psi_eps(v)`` with ``psi`` normalized to unit mass."""
        v = np.asarray(v, dtype=float)
        return np.prod(bump_profile(v / self.epsilon), axis=-1) / (
            _BUMP_MASS**self.grid.dim * self.epsilon**self.grid.dim
        )


def _bump_mass() -> float:
    from scipy.integrate import quad

    return quad(lambda u: float(bump_profile(np.array([u]))[0]), -0.25, 0.25)[0]


_BUMP_MASS = _bump_mass()


def mollify_density(rho, kernel: Mollifier) -> np.ndarray:
    """Circular convolution of a grid field with the kernel's discrete weights.

    Works for scalar fields of shape ``grid.shape`` and for vector fields with
    one trailing component axis.
    """
    rho = np.asarray(rho, dtype=float)
    g = kernel.grid
    if rho.shape[: g.dim] != g.shape:
        raise ValueError(f"field shape {rho.shape} does not match grid {g.shape}")
    if kernel.is_identity:
        return rho.copy()
    out = np.zeros_like(rho)
    axes = tuple(range(g.dim))
    for off, w in zip(kernel.offsets, kernel.weights):
        out += w * np.roll(rho, shift=tuple(int(o) for o in off), axis=axes)
    return out


def _corner_weights(points, grid: TorusGrid):
    """Lower-corner cell indices and bilinear weights for periodic interpolation."""
    points = np.asarray(points, dtype=float)
    u = points * grid.n
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64) % grid.n
    corners = []
    for bits in np.ndindex(*(2,) * grid.dim):
        bits = np.asarray(bits)
        idx = (base + bits) % grid.n
        w = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=-1)
        corners.append((tuple(idx[..., a] for a in range(grid.dim)), w))
    return corners


def periodic_interp(field_values, grid: TorusGrid, points) -> np.ndarray:
    """Periodic multilinear interpolation of a grid field at arbitrary points.

    ``field_values`` has shape ``grid.shape`` or ``grid.shape + (k,)``;
    ``points`` has shape ``(..., dim)``.
    """
    field_values = np.asarray(field_values, dtype=float)
    out = 0.0
    for idx, w in _corner_weights(points, grid):
        vals = field_values[idx]
        out = out + (w[..., None] * vals if vals.ndim > w.ndim else w * vals)
    return np.asarray(out)


def cic_deposit(points, masses, grid: TorusGrid) -> np.ndarray:
    """Area-weighted (cloud-in-cell) deposition of point masses onto the grid.

    Returns per-cell masses of shape ``grid.shape``; total mass is preserved.
    """
    masses = np.asarray(masses, dtype=float)
    out = np.zeros(grid.shape)
    for idx, w in _corner_weights(points, grid):
        np.add.at(out, idx, w * masses)
    return out


# -- serialization ---------------------------------------------------------


def density_to_csv(values) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["cell", "value"])
    for k, v in enumerate(np.asarray(values, dtype=float).ravel()):
        writer.writerow([k, repr(float(v))])
    return buf.getvalue()


def density_from_csv(text: str, grid: TorusGrid) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = np.zeros(grid.size)
    for row in rows:
        out[int(row["cell"])] = float(row["value"])
    return out.reshape(grid.shape)


def density_to_json(values) -> str:
    return json.dumps(np.asarray(values, dtype=float).ravel().tolist())


def density_from_json(text: str, grid: TorusGrid) -> np.ndarray:
    return np.asarray(json.loads(text), dtype=float).reshape(grid.shape)
