"""Constructive volume-matching maps between two density paths.

For each time frame, ``theta`` solves ``lap theta = f - g`` with zero mean,
``v(s) = grad theta / ((1 - s) f + s g)`` and the map is the time-one flow
of ``v`` in the pseudo-time ``s``. By construction it pushes ``f`` onto
``g``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_lower_bound, check_same_grid
from .coupling import transport_lp
from .fields import DensityPath, FieldPath, e_norm, spatial_lipschitz
from .torus import TorusGrid, cic_deposit, min_image_disp, periodic_interp, squared_distance_matrix

LOWER_BOUND = 0.5
MEAN_TOL = 1e-12
MAX_SUBSTEP = 0.25
REFINE_TOL = 1e-6
MAX_REFINEMENTS = 8
W1_LP_MAX_CELLS = 400


def _wavenumbers(grid: TorusGrid) -> list[np.ndarray]:
    k = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    return np.meshgrid(*([k] * grid.dim), indexing="ij")


def _laplacian_symbol(grid: TorusGrid) -> np.ndarray:
    ks = _wavenumbers(grid)
    return -4.0 * np.pi**2 * sum(k * k for k in ks)


def laplacian(theta, grid: TorusGrid) -> np.ndarray:
    """Spectral Laplacian with the continuum symbol ``-4 pi^2 |k|^2``."""
    theta = np.asarray(theta, dtype=float)
    return np.real(np.fft.ifftn(_laplacian_symbol(grid) * np.fft.fftn(theta)))


def gradient(theta, grid: TorusGrid) -> np.ndarray:
    """Spectral gradient, shape ``grid.shape + (dim,)``.

    The Nyquist mode is dropped on even grids so the result stays real and
    consistent with :func:`laplacian` in the divergence sense.
    """
    theta_hat = np.fft.fftn(np.asarray(theta, dtype=float))
    out = []
    for k in _wavenumbers(grid):
        k = np.where(np.abs(k) == grid.n / 2, 0.0, k)
        out.append(np.real(np.fft.ifftn(2j * np.pi * k * theta_hat)))
    return np.stack(out, axis=-1)


def poisson_solve(h, grid: TorusGrid) -> np.ndarray:
    """Zero-mean solution of ``lap theta = h`` on the periodic grid.

    ``h`` must have zero mean up to ``1e-12`` (relative to its size); the tiny
    remainder is projected out.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != grid.shape:
        raise ValueError(f"field shape {h.shape} does not match grid {grid.shape}")
    mean = float(h.mean())
    if abs(mean) > MEAN_TOL * max(1.0, float(np.max(np.abs(h)))):
        raise ValueError(f"Poisson right-hand side must have zero mean (mean {mean:.3e})")
    sym = _laplacian_symbol(grid)
    h_hat = np.fft.fftn(h - mean)
    sym_safe = np.where(sym == 0, 1.0, sym)
    theta_hat = np.where(sym == 0, 0.0, h_hat / sym_safe)
    return np.real(np.fft.ifftn(theta_hat))


def _check_pair(f: DensityPath, g: DensityPath):
    check_same_grid(f.grid, g.grid)
    if f.frames.shape != g.frames.shape or not np.allclose(f.time_grid, g.time_grid):
        raise ValueError("density paths have different time grids")
    mf, mg = f.masses(), g.masses()
    if np.any(np.abs(mf - mg) > 1e-9):
        raise ValueError("frames of f and g carry different masses")
    check_lower_bound(f.frames, LOWER_BOUND, "source density")
    check_lower_bound(g.frames, LOWER_BOUND, "target density")


def frame_velocity(f_frame, g_frame, s: float, grid: TorusGrid) -> np.ndarray:
    """Velocity ``grad theta / ((1-s) f + s g)`` for a single time frame."""
    f_frame = np.asarray(f_frame, dtype=float)
    g_frame = np.asarray(g_frame, dtype=float)
    if abs(f_frame.sum() - g_frame.sum()) * grid.cell_volume > 1e-9:
        raise ValueError("f and g frames carry different masses")
    check_lower_bound(f_frame, LOWER_BOUND, "source density")
    check_lower_bound(g_frame, LOWER_BOUND, "target density")
    grad = gradient(poisson_solve(f_frame - g_frame, grid), grid)
    rho_s = (1.0 - s) * f_frame + s * g_frame
    return grad / rho_s[..., None]


def build_velocity(f: DensityPath, g: DensityPath, s: float) -> np.ndarray:
    """Velocity fields for every time frame, shape ``(T+1, *grid.shape, dim)``."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"pseudo-time must lie in [0, 1], got {s}")
    _check_pair(f, g)
    return np.stack([frame_velocity(a, b, s, f.grid) for a, b in zip(f.frames, g.frames)])


@dataclass
class StraighteningMap:
    """Per-frame displacement ``Psi(t, x) - x`` at the cell centers.

    ``displacement`` has shape ``(T+1, *grid.shape, dim)``; off-grid points
    are mapped through the periodic linear interpolant of the displacement.
    """

    grid: TorusGrid
    time_grid: np.ndarray
    displacement: np.ndarray
    ode_steps: int = 0

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        self.displacement = np.asarray(self.displacement, dtype=float)
        expect = (len(self.time_grid),) + self.grid.shape + (self.grid.dim,)
        if self.displacement.shape != expect:
            raise ValueError(f"displacement shape {self.displacement.shape}, expected {expect}")
        if np.any(np.abs(self.displacement) >= 0.5):
            raise ValueError("displacements must stay below 1/2 per axis")

    @classmethod
    def identity(cls, grid: TorusGrid, time_grid) -> "StraighteningMap":
        time_grid = np.asarray(time_grid, dtype=float)
        return cls(grid, time_grid, np.zeros((len(time_grid),) + grid.shape + (grid.dim,)))

    @property
    def norm_excess(self) -> float:
        """``N(Psi - Id)`` computed on the displacement field."""
        if len(self.time_grid) < 2:
            return spatial_lipschitz(self.displacement[0], self.grid)
        return e_norm(FieldPath(self.grid, self.time_grid, self.displacement))

    def is_identity(self) -> bool:
        return not np.any(self.displacement)

    def apply(self, points, frame: int) -> np.ndarray:
        """Map points (shape ``(..., dim)``) through ``Psi`` at time index ``frame``; result wrapped to [0,1)."""
        points = np.asarray(points, dtype=float)
        disp = self.displacement[frame]
        if not np.any(disp):
            return np.mod(points, 1.0)
        return np.mod(points + periodic_interp(disp, self.grid, points), 1.0)

    def jacobian_determinants(self) -> np.ndarray:
        """Determinant of the (centered-difference) Jacobian at each cell center and frame."""
        g = self.grid
        out = []
        for disp in self.displacement:
            J = np.zeros(g.shape + (g.dim, g.dim))
            for a in range(g.dim):
                d = (np.roll(disp, -1, axis=a) - np.roll(disp, 1, axis=a)) / (2 * g.spacing)
                J[..., :, a] = d
                J[..., a, a] += 1.0
            out.append(np.linalg.det(J))
        return np.stack(out)

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid": self.grid.to_dict(),
                "time_grid": self.time_grid.tolist(),
                "displacement": self.displacement.tolist(),
                "ode_steps": self.ode_steps,
                "norm_excess": self.norm_excess,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "StraighteningMap":
        d = json.loads(text)
        return cls(TorusGrid.from_dict(d["grid"]), d["time_grid"], d["displacement"], d.get("ode_steps", 0))


def _integrate_frame(f_frame, g_frame, grid: TorusGrid, steps: int) -> np.ndarray:
    grad = gradient(poisson_solve(f_frame - g_frame, grid), grid)
    x = grid.cell_centers.copy()
    x0 = x.copy()
    h = 1.0 / steps

    def vel(pts, s):
        rho = (1.0 - s) * periodic_interp(f_frame, grid, pts) + s * periodic_interp(g_frame, grid, pts)
        return periodic_interp(grad, grid, pts) / rho[:, None]

    for k in range(steps):
        s = k * h
        k1 = vel(x, s)
        k2 = vel(x + 0.5 * h * k1, s + 0.5 * h)
        k3 = vel(x + 0.5 * h * k2, s + 0.5 * h)
        k4 = vel(x + h * k3, s + h)
        dx = h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if np.max(np.abs(dx)) > MAX_SUBSTEP:
            raise FloatingPointError("pseudo-time step too coarse (substep displacement above 1/4)")
        x = x + dx
    return min_image_disp(x0, x).reshape(grid.shape + (grid.dim,))


def _map_with_steps(f: DensityPath, g: DensityPath, steps: int) -> StraighteningMap:
    disp = np.zeros(f.frames.shape + (f.grid.dim,))
    for t, (a, b) in enumerate(zip(f.frames, g.frames)):
        if np.array_equal(a, b):
            continue
        disp[t] = _integrate_frame(a, b, f.grid, steps)
    return StraighteningMap(f.grid, f.time_grid, disp, steps)


def flow_map(f: DensityPath, g: DensityPath, ode_steps: int = 32) -> StraighteningMap:
    """Map ``Psi`` with ``Psi(t) # f(t) = g(t)`` for every frame.

    RK4 in pseudo-time starting from ``ode_steps`` steps, doubled until
    ``N(Psi - Id)`` moves by less than ``1e-6``. Frames with ``f = g`` are
    left exactly fixed.
    """
    if ode_steps < 8:
        raise ValueError(f"ode_steps must be at least 8, got {ode_steps}")
    _check_pair(f, g)
    current = _map_with_steps(f, g, ode_steps)
    if current.is_identity():
        return current
    for _ in range(MAX_REFINEMENTS):
        finer = _map_with_steps(f, g, 2 * current.ode_steps)
        done = abs(finer.norm_excess - current.norm_excess) < REFINE_TOL
        current = finer
        if done:
            break
    return current


def w1_distance(a, b, grid: TorusGrid) -> float:
    """1-Wasserstein distance between two cell-mass arrays on the torus.

    Closed form on the circle; exact transport LP in two dimensions (small
    grids only).
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if grid.dim == 1:
        c = np.cumsum(a - b)
        return float(grid.spacing * np.sum(np.abs(c - np.median(c))))
    if grid.size > W1_LP_MAX_CELLS:
        raise ValueError(f"2-d W1 is limited to {W1_LP_MAX_CELLS} cells")
    value, _ = transport_lp(a, b * (a.sum() / b.sum()), np.sqrt(squared_distance_matrix(grid)))
    return value


@dataclass
class PushforwardReport:
    w1: np.ndarray
    tv: np.ndarray
    deposited_mass: np.ndarray

    @property
    def max_w1(self) -> float:
        return float(np.max(self.w1))

    @property
    def max_tv(self) -> float:
        return float(np.max(self.tv))

    def to_dict(self) -> dict:
        return {"w1": self.w1.tolist(), "tv": self.tv.tolist(), "deposited_mass": self.deposited_mass.tolist()}


def pushforward_masses(psi: StraighteningMap, f_frame, frame: int) -> np.ndarray:
    g = psi.grid
    pts = psi.apply(g.cell_centers, frame)
    return cic_deposit(pts, np.asarray(f_frame, dtype=float).ravel() * g.cell_volume, g)


def verify_pushforward(psi: StraighteningMap, f: DensityPath, g: DensityPath) -> PushforwardReport:
    """Push ``f`` through ``psi`` with area-weighted deposition and compare to ``g``."""
    check_same_grid(psi.grid, f.grid)
    check_same_grid(f.grid, g.grid)
    w1, tv, mass = [], [], []
    for t in range(len(f.time_grid)):
        pushed = pushforward_masses(psi, f.frames[t], t)
        target = g.frames[t] * g.grid.cell_volume
        w1.append(w1_distance(pushed, target, g.grid))
        tv.append(float(np.abs(pushed - target).sum()))
        mass.append(float(pushed.sum()))
    return PushforwardReport(np.array(w1), np.array(tv), np.array(mass))


class DacorognaMoser(BaseEstimator):
    """Estimator wrapper: ``fit(f, g)`` builds the map, ``transform`` moves points."""

    def __init__(self, ode_steps: int = 32):
        self.ode_steps = ode_steps

    def fit(self, f: DensityPath, g: DensityPath):
        self.map_ = flow_map(f, g, self.ode_steps)
        self.norm_excess_ = self.map_.norm_excess
        return self

    def transform(self, points, frame: int = 0) -> np.ndarray:
        check_is_fitted(self, "map_")
        return self.map_.apply(points, frame)

    def score(self, f: DensityPath, g: DensityPath) -> float:
        """Negative worst per-frame W1 gap of the push-forward."""
        check_is_fitted(self, "map_")
        return -verify_pushforward(self.map_, f, g).max_w1
