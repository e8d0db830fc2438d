"""Discrete generalized flows: path lattices, explicit path measures,
chain-factored (entropic) path measures and pressure fields."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .fields import DensityPath, uniform_times
from .torus import TorusGrid, cic_deposit, min_image_disp, squared_distance_matrix


@dataclass(frozen=True)
class PathLattice:
    """Grid paths observed at ``steps + 1`` equally spaced times.

    ``step_cost[a, b] = dist(a, b)^2 / (2 dt)`` is the action of the geodesic
    segment between consecutive observation times.
    """

    grid: TorusGrid
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def times(self) -> np.ndarray:
        return uniform_times(self.steps)

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def step_cost(self) -> np.ndarray:
        return squared_distance_matrix(self.grid) / (2.0 * self.dt)

    @property
    def n_paths(self) -> int:
        return self.grid.size ** (self.steps + 1)

    def enumerate_paths(self) -> np.ndarray:
        """All lattice paths as cell-index rows, shape ``(N^(T+1), T+1)``."""
        N, T = self.grid.size, self.steps
        idx = np.indices((N,) * (T + 1)).reshape(T + 1, -1).T
        return np.ascontiguousarray(idx)

    def path_costs(self, paths: np.ndarray) -> np.ndarray:
        c = self.step_cost
        return c[paths[:, :-1], paths[:, 1:]].sum(axis=1)

    def positions(self, paths: np.ndarray) -> np.ndarray:
        return self.grid.cell_centers[paths]


@dataclass
class GeneralizedFlow:
    """Explicit path measure: finitely many weighted piecewise-geodesic paths.

    ``positions`` has shape ``(P, T+1, dim)`` with coordinates in ``[0, 1)``;
    consecutive observations are joined by the minimal-image segment.
    """

    grid: TorusGrid
    time_grid: np.ndarray
    positions: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        self.positions = np.mod(np.asarray(self.positions, dtype=float), 1.0)
        self.mass = np.asarray(self.mass, dtype=float)
        if self.positions.ndim != 3 or self.positions.shape[1:] != (len(self.time_grid), self.grid.dim):
            raise ValueError(f"positions shape {self.positions.shape} inconsistent with times/grid")
        if self.mass.shape != (self.positions.shape[0],):
            raise ValueError("one mass per path required")
        if np.any(self.mass < 0):
            raise ValueError("path masses must be nonnegative")

    @classmethod
    def from_cell_paths(cls, lattice: PathLattice, paths, mass) -> "GeneralizedFlow":
        paths = np.asarray(paths, dtype=np.int64)
        return cls(lattice.grid, lattice.times, lattice.positions(paths), mass)

    @property
    def n_paths(self) -> int:
        return len(self.mass)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def increments(self) -> np.ndarray:
        return min_image_disp(self.positions[:, :-1], self.positions[:, 1:])

    def path_actions(self) -> np.ndarray:
        inc = self.increments()
        dt = np.diff(self.time_grid)
        return 0.5 * np.sum(np.sum(inc * inc, axis=-1) / dt[None, :], axis=1)

    def action(self) -> float:
        return float(self.mass @ self.path_actions())

    def cell_paths(self) -> np.ndarray:
        return self.grid.cell_index(self.positions)

    def is_lattice(self, tol: float = 1e-9) -> bool:
        snapped = self.grid.cell_centers[self.cell_paths()]
        return bool(np.all(np.abs(min_image_disp(snapped, self.positions)) <= tol))

    def snapped(self) -> "GeneralizedFlow":
        """Every observation moved to its nearest cell center."""
        return GeneralizedFlow(self.grid, self.time_grid, self.grid.cell_centers[self.cell_paths()], self.mass)

    def merged(self, min_mass: float = 0.0) -> "GeneralizedFlow":
        """Lattice flow with identical cell paths merged (snaps first)."""
        cells = self.cell_paths()
        uniq, inv = np.unique(cells, axis=0, return_inverse=True)
        mass = np.bincount(inv.ravel(), weights=self.mass, minlength=len(uniq))
        keep = mass > min_mass
        return GeneralizedFlow(self.grid, self.time_grid, self.grid.cell_centers[uniq[keep]], mass[keep])

    def endpoint_coupling(self) -> np.ndarray:
        N = self.grid.size
        out = np.zeros((N, N))
        cells = self.cell_paths()
        np.add.at(out, (cells[:, 0], cells[:, -1]), self.mass)
        return out

    def cell_marginals(self) -> np.ndarray:
        """Per-time cell masses, shape ``(T+1, N)`` (nearest-cell deposition)."""
        cells = self.cell_paths()
        N = self.grid.size
        return np.stack([np.bincount(cells[:, k], weights=self.mass, minlength=N) for k in range(cells.shape[1])])

    def cic_marginals(self) -> np.ndarray:
        """Per-time cell masses with area-weighted (cloud-in-cell) deposition."""
        return np.stack(
            [cic_deposit(self.positions[:, k], self.mass, self.grid).ravel() for k in range(len(self.time_grid))]
        )

    def density(self, deposition: str = "nearest") -> DensityPath:
        """Per-time marginals as a density path.

        ``deposition="nearest"`` counts each observation in its nearest cell;
        ``"cic"`` spreads off-grid observations over the surrounding cells.
        The two agree on lattice flows.
        """
        if deposition == "nearest":
            m = self.cell_marginals()
        elif deposition == "cic":
            m = self.cic_marginals()
        else:
            raise ValueError(f"unknown deposition {deposition!r}")
        m = m / m.sum(axis=1, keepdims=True)
        return DensityPath.from_cell_masses(self.grid, self.time_grid, m)

    def position_at(self, s) -> np.ndarray:
        """Positions at (possibly off-grid) times ``s`` by following each segment."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = np.clip(np.searchsorted(self.time_grid, s, side="right") - 1, 0, len(self.time_grid) - 2)
        t0, t1 = self.time_grid[k], self.time_grid[k + 1]
        frac = ((s - t0) / (t1 - t0))[None, :, None]
        inc = self.increments()[:, k]
        return np.mod(self.positions[:, k] + frac * inc, 1.0)

    def resampled(self, time_grid) -> "GeneralizedFlow":
        """Same paths observed at a finer time grid (action unchanged when the
        new grid contains the old one)."""
        time_grid = np.asarray(time_grid, dtype=float)
        return GeneralizedFlow(self.grid, time_grid, self.position_at(time_grid), self.mass)

    def mixture(self, other: "GeneralizedFlow", s: float) -> "GeneralizedFlow":
        if other.grid != self.grid or not np.allclose(other.time_grid, self.time_grid):
            raise ValueError("flows live on different lattices")
        return GeneralizedFlow(
            self.grid,
            self.time_grid,
            np.concatenate([self.positions, other.positions]),
            np.concatenate([(1 - s) * self.mass, s * other.mass]),
        )

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "time_grid": self.time_grid.tolist(),
            "positions": self.positions.tolist(),
            "mass": self.mass.tolist(),
        }


@dataclass
class ChainFlow:
    """Chain-factored path measure produced by the entropic solver.

    The weight of a lattice path is
    ``W[x0, xT] * prod_k K[x_k, x_k+1] * prod_{interior k} u_k[x_k]``
    with ``K = exp(-step_cost / reg)``. Everything is stored in log form.
    """

    lattice: PathLattice
    reg: float
    log_w: np.ndarray
    log_u: np.ndarray

    @property
    def grid(self) -> TorusGrid:
        return self.lattice.grid

    @property
    def time_grid(self) -> np.ndarray:
        return self.lattice.times

    @property
    def log_kernel(self) -> np.ndarray:
        return -self.lattice.step_cost / self.reg

    def forward(self) -> list[np.ndarray]:
        """``log F_t[x0, a]``: chain weight from ``x0`` to ``a`` at step ``t`` (excluding ``u_t``)."""
        N, T = self.grid.size, self.lattice.steps
        logK = self.log_kernel
        eye = np.where(np.eye(N, dtype=bool), 0.0, -np.inf)
        out = [eye]
        for t in range(T):
            prev = out[-1] + self.log_u[t][None, :]
            out.append(logsumexp(prev[:, :, None] + logK[None, :, :], axis=1))
        return out

    def backward(self) -> list[np.ndarray]:
        """``log B_t[a, y]``: chain weight from ``a`` at step ``t`` to ``y`` at the end (excluding ``u_t``)."""
        N, T = self.grid.size, self.lattice.steps
        logK = self.log_kernel
        eye = np.where(np.eye(N, dtype=bool), 0.0, -np.inf)
        out = [None] * (T + 1)
        out[T] = eye
        for t in range(T - 1, -1, -1):
            nxt = self.log_u[t + 1][:, None] + out[t + 1]
            out[t] = logsumexp(logK[:, :, None] + nxt[None, :, :], axis=1)
        return out

    def log_normalizer(self) -> float:
        F = self.forward()
        return float(logsumexp(self.log_w + F[-1]))

    def endpoint_coupling(self) -> np.ndarray:
        F = self.forward()
        lj = self.log_w + F[-1]
        return np.exp(lj - logsumexp(lj))

    def cell_marginals(self) -> np.ndarray:
        F, B = self.forward(), self.backward()
        logZ = logsumexp(self.log_w + F[-1])
        T = self.lattice.steps
        out = []
        for t in range(T + 1):
            lm = self.log_u[t] + logsumexp(
                self.log_w[:, None, :] + F[t][:, :, None] + B[t][None, :, :], axis=(0, 2)
            )
            out.append(np.exp(lm - logZ))
        return np.stack(out)

    def density(self) -> DensityPath:
        m = self.cell_marginals()
        return DensityPath.from_cell_masses(self.grid, self.time_grid, m / m.sum(axis=1, keepdims=True))

    def pair_marginals(self) -> list[np.ndarray]:
        """Joint law of consecutive observations, one ``N x N`` matrix per step."""
        F, B = self.forward(), self.backward()
        logZ = logsumexp(self.log_w + F[-1])
        logK = self.log_kernel
        out = []
        for t in range(self.lattice.steps):
            left = F[t] + self.log_u[t][None, :]  # (x0, a)
            right = self.log_u[t + 1][:, None] + B[t + 1]  # (b, y)
            # sum_{x0, y} W[x0, y] exp(left[x0, a]) exp(right[b, y])
            lw_right = logsumexp(self.log_w[:, None, :] + right[None, :, :], axis=2)  # (x0, b)
            inner = logsumexp(left[:, :, None] + lw_right[:, None, :], axis=0)  # (a, b)
            out.append(np.exp(inner + logK - logZ))
        return out

    def action(self) -> float:
        c = self.lattice.step_cost
        return float(sum(np.sum(p * c) for p in self.pair_marginals()))

    def to_explicit(self) -> GeneralizedFlow:
        """Enumerate every lattice path with its normalized weight (small lattices only)."""
        paths = self.lattice.enumerate_paths()
        T = self.lattice.steps
        lw = self.log_w[paths[:, 0], paths[:, -1]]
        lw = lw + self.log_kernel[paths[:, :-1], paths[:, 1:]].sum(axis=1)
        lw = lw + sum(self.log_u[t][paths[:, t]] for t in range(1, T))
        w = np.exp(lw - logsumexp(lw))
        return GeneralizedFlow.from_cell_paths(self.lattice, paths, w)


@dataclass
class PressureField:
    """Zero-mean scalar field at each interior observation time."""

    grid: TorusGrid
    time_grid: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.shape != (len(self.time_grid),) + self.grid.shape:
            raise ValueError("pressure frames do not match interior times / grid")

    @classmethod
    def from_potentials(cls, grid: TorusGrid, steps: int, potentials: np.ndarray) -> "PressureField":
        """Pressure from per-interior-time potentials (divided by ``dt``, zero-mean gauge)."""
        potentials = np.asarray(potentials, dtype=float).reshape((steps - 1,) + grid.shape) * steps
        axes = tuple(range(1, 1 + grid.dim))
        potentials = potentials - potentials.mean(axis=axes, keepdims=True)
        return cls(grid, uniform_times(steps)[1:-1], potentials)

    @property
    def dt(self) -> float:
        return float(1.0 / (len(self.time_grid) + 1))

    def max_abs_mean(self) -> float:
        axes = tuple(range(1, 1 + self.grid.dim))
        if len(self.time_grid) == 0:
            return 0.0
        return float(np.max(np.abs(self.frames.mean(axis=axes))))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "time_grid": self.time_grid.tolist(),
            "frames": self.frames.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def flow_action(eta) -> float:
    """Action of an explicit or chain-factored flow."""
    return eta.action()


def density_of_flow(eta, deposition: str = "nearest") -> DensityPath:
    """Per-time marginals of a flow as a density path."""
    if isinstance(eta, ChainFlow):
        return eta.density()
    return eta.density(deposition)


def product_flow(gamma_mass: np.ndarray, lattice: PathLattice) -> GeneralizedFlow:
    """Endpoint coupling with independent uniform intermediate positions.

    Every interior marginal is uniform, so this flow is admissible for any
    bistochastic endpoint datum.
    """
    N, T = lattice.grid.size, lattice.steps
    x, y = np.nonzero(gamma_mass > 0)
    inner = np.array(list(itertools.product(range(N), repeat=T - 1)), dtype=np.int64).reshape(-1, T - 1)
    k = len(inner)
    paths = np.concatenate(
        [np.repeat(x, k)[:, None], np.tile(inner, (len(x), 1)), np.repeat(y, k)[:, None]], axis=1
    )
    mass = np.repeat(gamma_mass[x, y], k) / N ** (T - 1)
    return GeneralizedFlow.from_cell_paths(lattice, paths, mass)


def perturb_flow(eta: GeneralizedFlow, xi_frames: np.ndarray, delta: float) -> GeneralizedFlow:
    """Move each observation ``omega(t)`` to ``omega(t) + delta * xi(t, omega(t))``.

    ``xi_frames`` holds one vector grid field per observation time; it is read
    at the nearest cell of each observation.
    """
    cells = eta.cell_paths()
    T1 = len(eta.time_grid)
    xi = np.asarray(xi_frames, dtype=float).reshape(T1, eta.grid.size, eta.grid.dim)
    shift = xi[np.arange(T1)[None, :], cells]
    return GeneralizedFlow(eta.grid, eta.time_grid, eta.positions + delta * shift, eta.mass)


def split_to_lattice(eta: GeneralizedFlow) -> GeneralizedFlow:
    """Lattice flow obtained by splitting every off-grid observation between
    the surrounding cells with multilinear (cloud-in-cell) weights.

    Each observation time is split independently, so the per-time marginals
    are exactly the cloud-in-cell depositions of the input marginals.
    """
    g = eta.grid
    n, d = g.n, g.dim
    P, T1 = eta.positions.shape[:2]
    corners = np.array(list(itertools.product((0, 1), repeat=d)))  # (2^d, d)
    paths = np.zeros((P, 0), dtype=np.int64)
    mass = eta.mass.copy()
    owner = np.arange(P)
    for k in range(T1):
        x = eta.positions[:, k] * n
        base = np.floor(x).astype(np.int64)
        frac = x - base
        cell = (base[:, None, :] + corners[None, :, :]) % n  # (P, 2^d, d)
        w = np.prod(np.where(corners[None, :, :] == 1, frac[:, None, :], 1 - frac[:, None, :]), axis=-1)
        flat = cell[..., 0] if d == 1 else cell[..., 0] * n + cell[..., 1]
        # branch every current partial path into its owner's corners
        w_o, c_o = w[owner], flat[owner]
        keep = w_o > 0
        rep, corner = np.nonzero(keep)
        paths = np.concatenate([paths[rep], c_o[rep, corner][:, None]], axis=1)
        mass = mass[rep] * w_o[rep, corner]
        owner = owner[rep]
    out = GeneralizedFlow(g, eta.time_grid, g.cell_centers[paths], mass)
    return out.merged()
