"""Time-indexed grid fields, the norm ``N`` on the space ``E`` and the
time/space regularization of density paths and vector fields."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .torus import Mollifier, TorusGrid, mollify_density

MASS_TOL = 1e-9


def uniform_times(steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError(f"need at least one time step, got {steps}")
    return np.linspace(0.0, 1.0, steps + 1)


@dataclass
class FieldPath:
    """Scalar or vector grid field sampled at ``time_grid``.

    ``frames`` has shape ``(len(time_grid), *grid.shape)`` for scalar fields
    and ``(len(time_grid), *grid.shape, k)`` for ``k``-component fields.
    ``tau`` marks membership of ``E_tau`` (vanishing near both time ends).
    """

    grid: TorusGrid
    time_grid: np.ndarray
    frames: np.ndarray
    tau: float | None = None

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.shape[0] != len(self.time_grid):
            raise ValueError("frames and time_grid disagree on the number of times")
        if self.frames.shape[1 : 1 + self.grid.dim] != self.grid.shape:
            raise ValueError(f"frame shape {self.frames.shape[1:]} does not match grid {self.grid.shape}")
        if np.any(np.diff(self.time_grid) <= 0):
            raise ValueError("time_grid must be strictly increasing")
        if self.tau is not None:
            if not 0.0 < self.tau < 0.25:
                raise ValueError(f"tau must lie in (0, 1/4), got {self.tau}")
            outside = (self.time_grid <= self.tau + 1e-12) | (self.time_grid >= 1 - self.tau - 1e-12)
            if np.any(self.frames[outside] != 0.0):
                raise ValueError("field tagged E_tau does not vanish on [0,tau] U [1-tau,1]")

    @property
    def is_vector(self) -> bool:
        return self.frames.ndim == 2 + self.grid.dim

    @property
    def steps(self) -> int:
        return len(self.time_grid) - 1

    def __mul__(self, other: "FieldPath") -> "FieldPath":
        _check_same_grids(self, other)
        return FieldPath(self.grid, self.time_grid, self.frames * other.frames)

    def __sub__(self, other: "FieldPath") -> "FieldPath":
        _check_same_grids(self, other)
        return FieldPath(self.grid, self.time_grid, self.frames - other.frames)

    def __add__(self, other: "FieldPath") -> "FieldPath":
        _check_same_grids(self, other)
        return FieldPath(self.grid, self.time_grid, self.frames + other.frames)

    def scaled(self, c: float) -> "FieldPath":
        return FieldPath(self.grid, self.time_grid, c * self.frames)

    def sup_norm(self) -> float:
        f = self.frames
        if self.is_vector:
            f = np.sqrt(np.sum(f * f, axis=-1))
        return float(np.max(np.abs(f)))

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid": self.grid.to_dict(),
                "time_grid": self.time_grid.tolist(),
                "frames": self.frames.tolist(),
                "tau": self.tau,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FieldPath":
        d = json.loads(text)
        return cls(TorusGrid.from_dict(d["grid"]), d["time_grid"], d["frames"], d.get("tau"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        if self.is_vector:
            k = self.frames.shape[-1]
            w.writerow(["t", "cell"] + [f"value_{j}" for j in range(k)])
            for t, fr in zip(self.time_grid, self.frames):
                for cell, v in enumerate(fr.reshape(-1, k)):
                    w.writerow([repr(float(t)), cell] + [repr(float(x)) for x in v])
        else:
            w.writerow(["t", "cell", "value"])
            for t, fr in zip(self.time_grid, self.frames):
                for cell, v in enumerate(fr.ravel()):
                    w.writerow([repr(float(t)), cell, repr(float(v))])
        return buf.getvalue()


@dataclass
class DensityPath(FieldPath):
    """Path of probability densities (with respect to the uniform measure).

    Each frame is nonnegative and integrates to one with cell-volume weights,
    so the uniform frame is identically 1.
    """

    def __post_init__(self):
        super().__post_init__()
        if self.is_vector:
            raise ValueError("density frames must be scalar")
        if np.any(self.frames < 0):
            raise ValueError("density frames must be nonnegative")
        mass = self.masses()
        if np.any(np.abs(mass - 1.0) > MASS_TOL):
            raise ValueError(f"density frames must have unit mass, got {mass}")

    def masses(self) -> np.ndarray:
        axes = tuple(range(1, 1 + self.grid.dim))
        return self.frames.sum(axis=axes) * self.grid.cell_volume

    def cell_masses(self) -> np.ndarray:
        """Frames as per-cell probabilities, shape ``(T+1, grid.size)``."""
        return self.frames.reshape(len(self.time_grid), -1) * self.grid.cell_volume

    def is_admissible(self, tol: float = 1e-12) -> bool:
        """Whether both end frames are uniform."""
        return bool(np.all(np.abs(self.frames[[0, -1]] - 1.0) <= tol))

    @classmethod
    def uniform(cls, grid: TorusGrid, steps: int) -> "DensityPath":
        times = uniform_times(steps)
        return cls(grid, times, np.ones((steps + 1,) + grid.shape))

    @classmethod
    def from_cell_masses(cls, grid: TorusGrid, time_grid, masses) -> "DensityPath":
        masses = np.asarray(masses, dtype=float)
        frames = masses.reshape((len(time_grid),) + grid.shape) / grid.cell_volume
        return cls(grid, time_grid, frames)

    @classmethod
    def from_json(cls, text: str) -> "DensityPath":
        d = json.loads(text)
        return cls(TorusGrid.from_dict(d["grid"]), d["time_grid"], d["frames"])


def _check_same_grids(a: FieldPath, b: FieldPath):
    if a.grid != b.grid or a.time_grid.shape != b.time_grid.shape or not np.allclose(a.time_grid, b.time_grid):
        raise ValueError("field paths live on different grids")


def spatial_lipschitz(frame: np.ndarray, grid: TorusGrid) -> float:
    """Discrete Lipschitz constant of one frame.

    Forward differences to the adjacent cell along each axis (wrapping around
    the torus), combined per cell in Euclidean norm over axes and components.
    """
    frame = np.asarray(frame, dtype=float)
    sq = np.zeros(grid.shape)
    for axis in range(grid.dim):
        d = (np.roll(frame, -1, axis=axis) - frame) / grid.spacing
        if d.ndim > grid.dim:
            d = np.sum(d * d, axis=-1)
        else:
            d = d * d
        sq = sq + d
    return float(np.sqrt(sq.max()))


def time_derivative_l2(f: FieldPath) -> float:
    """``(sum_k dt_k * sup_x |forward time difference quotient|^2)^(1/2)``."""
    dt = np.diff(f.time_grid)
    diff = np.diff(f.frames, axis=0)
    if f.is_vector:
        mag = np.sqrt(np.sum(diff * diff, axis=-1))
    else:
        mag = np.abs(diff)
    sup = mag.reshape(len(dt), -1).max(axis=1) / dt
    return float(np.sqrt(np.sum(dt * sup**2)))


def e_norm(f: FieldPath) -> float:
    """Sup-in-time Lipschitz constant plus the L2-in-time, sup-in-space norm
    of the time derivative."""
    if len(f.time_grid) < 2:
        raise ValueError("N needs at least two time frames")
    lip = max(spatial_lipschitz(fr, f.grid) for fr in f.frames)
    return lip + time_derivative_l2(f)


def lipschitz_product_bound(a: FieldPath, b: FieldPath, constant: float = 1.0) -> float:
    """Return ``N(ab)``, checking the Leibniz-form bound
    ``N(ab) <= C (|a|_inf N(b) + |b|_inf N(a))``.

    With forward differences the discrete product rule makes ``C = 1``
    sufficient, so a violation means the inputs are corrupted (NaN etc).
    """
    _check_same_grids(a, b)
    n_ab = e_norm(a * b)
    bound = constant * (a.sup_norm() * e_norm(b) + b.sup_norm() * e_norm(a))
    if not n_ab <= bound * (1 + 1e-12) + 1e-12:
        raise ArithmeticError(f"product bound violated: N(ab)={n_ab} > {bound}")
    return n_ab


def _rescaled_index(t: float, eps: float, source_times: np.ndarray) -> int:
    s = (t - eps) / (1.0 - 2.0 * eps)
    return int(np.argmin(np.abs(source_times - s)))


def _in_ramp(t: float, eps: float) -> bool:
    return t <= eps + 1e-12 or t >= 1.0 - eps - 1e-12


def regularize_density(rho: DensityPath, eps: float, time_grid=None) -> DensityPath:
    """Space-time regularization of an admissible density path.

    Uniform on ``[0, eps]`` and ``[1 - eps, 1]``; in between, the mollified
    frame of ``rho`` at the rescaled time ``(t - eps) / (1 - 2 eps)``, using the
    nearest available frame. ``time_grid`` selects the output times (default:
    those of ``rho``).
    """
    if not 0.0 < eps <= 0.25:
        raise ValueError(f"eps must lie in (0, 1/4], got {eps}")
    times = rho.time_grid if time_grid is None else np.asarray(time_grid, dtype=float)
    kernel = Mollifier(eps, rho.grid)
    frames = np.empty((len(times),) + rho.grid.shape)
    for k, t in enumerate(times):
        if _in_ramp(t, eps):
            frames[k] = 1.0
        else:
            frames[k] = mollify_density(rho.frames[_rescaled_index(t, eps, rho.time_grid)], kernel)
    return DensityPath(rho.grid, times, frames)


def regularize_field(xi: FieldPath, eps: float, time_grid=None) -> FieldPath:
    """Same construction as :func:`regularize_density` with zero on the ramps."""
    if not 0.0 < eps <= 0.25:
        raise ValueError(f"eps must lie in (0, 1/4], got {eps}")
    times = xi.time_grid if time_grid is None else np.asarray(time_grid, dtype=float)
    kernel = Mollifier(eps, xi.grid)
    frames = np.zeros((len(times),) + xi.frames.shape[1:])
    for k, t in enumerate(times):
        if not _in_ramp(t, eps):
            frames[k] = mollify_density(xi.frames[_rescaled_index(t, eps, xi.time_grid)], kernel)
    tau = xi.tau
    if tau is not None:
        outside = (times <= tau + 1e-12) | (times >= 1 - tau - 1e-12)
        if np.any(frames[outside] != 0.0):
            tau = None
    return FieldPath(xi.grid, times, frames, tau=tau)


def divergence(frame: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Centered-difference divergence of a vector grid field (zero mean)."""
    frame = np.asarray(frame, dtype=float)
    out = np.zeros(grid.shape)
    for axis in range(grid.dim):
        comp = frame[..., axis]
        out += (np.roll(comp, -1, axis=axis) - np.roll(comp, 1, axis=axis)) / (2 * grid.spacing)
    return out


def l2_time_sup_space(f: FieldPath) -> float:
    """``(sum_k dt_k sup_x |f(t_k)|^2)^(1/2)`` with right-endpoint weights."""
    fr = f.frames
    if f.is_vector:
        fr = np.sqrt(np.sum(fr * fr, axis=-1))
    sup = np.abs(fr).reshape(len(f.time_grid), -1).max(axis=1)
    dt = np.diff(f.time_grid)
    return float(np.sqrt(np.sum(dt * sup[1:] ** 2)))
