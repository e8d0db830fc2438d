"""Bistochastic endpoint measures and the quadratic Monge-Kantorovich
distance between them."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .torus import TorusGrid, squared_distance_matrix

BISTOCHASTIC_TOL = 1e-9


@dataclass
class BistochasticMeasure:
    """Coupling on grid x grid whose two marginals are uniform.

    ``mass[i, j]`` is the probability of starting in cell ``i`` and ending in
    cell ``j`` (flat row-major indices); rows and columns sum to ``1 / size``.
    """

    grid: TorusGrid
    mass: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float)
        N = self.grid.size
        if self.mass.shape != (N, N):
            raise ValueError(f"mass must have shape {(N, N)}, got {self.mass.shape}")
        if np.any(self.mass < 0):
            raise ValueError("mass must be nonnegative")
        res = self.marginal_residual()
        if res > BISTOCHASTIC_TOL:
            raise ValueError(f"marginals are not uniform (max residual {res:.3e})")

    def marginal_residual(self) -> float:
        N = self.grid.size
        return float(
            max(
                np.max(np.abs(self.mass.sum(axis=1) - 1.0 / N)),
                np.max(np.abs(self.mass.sum(axis=0) - 1.0 / N)),
            )
        )

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = np.nonzero(self.mass > 0)
        return i, j

    def transpose(self) -> "BistochasticMeasure":
        return BistochasticMeasure(self.grid, self.mass.T.copy())

    def blend(self, other: "BistochasticMeasure", s: float) -> "BistochasticMeasure":
        """Convex combination ``(1 - s) self + s other`` (bistochastic again)."""
        if other.grid != self.grid:
            raise ValueError("grid mismatch")
        return BistochasticMeasure(self.grid, (1 - s) * self.mass + s * other.mass)

    def free_motion_action(self) -> float:
        """``1/2 sum gamma(i,j) dist(i,j)^2``, the action without incompressibility."""
        return 0.5 * float(np.sum(self.mass * squared_distance_matrix(self.grid)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["i", "j", "mass"])
        for i, j in zip(*np.nonzero(self.mass)):
            w.writerow([i, j, repr(float(self.mass[i, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, grid: TorusGrid) -> "BistochasticMeasure":
        m = np.zeros((grid.size, grid.size))
        for row in csv.DictReader(io.StringIO(text)):
            m[int(row["i"]), int(row["j"])] = float(row["mass"])
        return cls(grid, m)

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "mass": self.mass.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "BistochasticMeasure":
        return cls(TorusGrid.from_dict(d["grid"]), d["mass"])

    @classmethod
    def from_json(cls, text: str) -> "BistochasticMeasure":
        return cls.from_dict(json.loads(text))


@dataclass
class TransportPlan4:
    """Sparse optimal plan between two bistochastic measures.

    Atom ``k`` moves ``mass[k]`` from the endpoint pair ``(x[k], y[k])`` of the
    source to the pair ``(X[k], Y[k])`` of the target.
    """

    source: BistochasticMeasure
    target: BistochasticMeasure
    x: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    mass: np.ndarray

    def source_marginal(self) -> np.ndarray:
        N = self.source.grid.size
        out = np.zeros((N, N))
        np.add.at(out, (self.x, self.y), self.mass)
        return out

    def target_marginal(self) -> np.ndarray:
        N = self.target.grid.size
        out = np.zeros((N, N))
        np.add.at(out, (self.X, self.Y), self.mass)
        return out

    def cost(self) -> float:
        c = squared_distance_matrix(self.source.grid)
        return float(np.sum(self.mass * (c[self.x, self.X] + c[self.y, self.Y])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["x", "y", "X", "Y", "mass"])
        for row in zip(self.x, self.y, self.X, self.Y, self.mass):
            w.writerow(list(map(int, row[:4])) + [repr(float(row[4]))])
        return buf.getvalue()


def transport_lp(a, b, cost) -> tuple[float, np.ndarray]:
    """Exact discrete optimal transport between weight vectors ``a`` and ``b``.

    Solved as a linear program with the HiGHS dual simplex. Returns the optimal
    cost and the dense plan (tiny negative round-off clipped to zero).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cost = np.asarray(cost, dtype=float)
    m, n = cost.shape
    if a.shape != (m,) or b.shape != (n,):
        raise ValueError("weights do not match cost matrix shape")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ValueError(f"unbalanced masses {a.sum()} vs {b.sum()}")
    rows = np.concatenate([np.repeat(np.arange(m), n), m + np.tile(np.arange(n), m)])
    cols = np.concatenate([np.arange(m * n), np.arange(m * n)])
    A = sparse.csc_matrix((np.ones(2 * m * n), (rows, cols)), shape=(m + n, m * n))
    res = linprog(
        cost.ravel(),
        A_eq=A,
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs-ds",
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.clip(res.x.reshape(m, n), 0.0, None)
    return float(cost.ravel() @ plan.ravel()), plan


def mk_distance(mu: BistochasticMeasure, nu: BistochasticMeasure) -> tuple[float, TransportPlan4]:
    """Quadratic Monge-Kantorovich distance on the product torus.

    Ground cost is the squared Euclidean distance on (torus)^2, i.e. the sum of
    squared geodesic distances of both coordinates. Only the supports enter the
    linear program.
    """
    if mu.grid != nu.grid:
        raise ValueError("grid mismatch")
    for m in (mu, nu):
        if m.marginal_residual() > BISTOCHASTIC_TOL:
            raise ValueError("inputs must be bistochastic")
    c = squared_distance_matrix(mu.grid)
    xi, yi = mu.support()
    Xi, Yi = nu.support()
    cost = c[xi][:, Xi] + c[yi][:, Yi]
    value, plan = transport_lp(mu.mass[xi, yi], nu.mass[Xi, Yi], cost)
    r, s = np.nonzero(plan > 0)
    tp = TransportPlan4(mu, nu, xi[r], yi[r], Xi[s], Yi[s], plan[r, s])
    return float(np.sqrt(max(value, 0.0))), tp


# -- constructors ----------------------------------------------------------


def permutation_coupling(grid: TorusGrid, perm) -> BistochasticMeasure:
    perm = np.asarray(perm, dtype=int)
    N = grid.size
    if sorted(perm.tolist()) != list(range(N)):
        raise ValueError("not a permutation of the cells")
    m = np.zeros((N, N))
    m[np.arange(N), perm] = 1.0 / N
    return BistochasticMeasure(grid, m)


def gamma_identity(grid: TorusGrid) -> BistochasticMeasure:
    """Stay-put coupling ``(Id, Id)`` pushed from the uniform measure."""
    return permutation_coupling(grid, np.arange(grid.size))


def gamma_shift(grid: TorusGrid, shift) -> BistochasticMeasure:
    """Coupling of each cell with its translate by ``shift`` cells per axis."""
    shift = np.broadcast_to(np.asarray(shift, dtype=int), (grid.dim,))
    idx = np.arange(grid.size).reshape(grid.shape)
    moved = np.roll(idx, tuple(-int(s) for s in shift), axis=tuple(range(grid.dim)))
    return permutation_coupling(grid, moved.ravel())


def product_coupling(grid: TorusGrid) -> BistochasticMeasure:
    N = grid.size
    return BistochasticMeasure(grid, np.full((N, N), 1.0 / N**2))


def sinkhorn_scale(log_kernel: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
    """Scale ``exp(log_kernel)`` to have all row and column sums ``1/N``."""
    N = log_kernel.shape[0]
    target = -np.log(N)
    f = np.zeros(N)
    g = np.zeros(N)
    for _ in range(max_iter):
        f = target - logsumexp(log_kernel + g[None, :], axis=1)
        g = target - logsumexp(log_kernel + f[:, None], axis=0)
        P = np.exp(log_kernel + f[:, None] + g[None, :])
        if np.max(np.abs(P.sum(axis=1) - 1.0 / N)) < tol:
            break
    return P


def random_bistochastic(grid: TorusGrid, seed: int, heat: float = 1.0) -> BistochasticMeasure:
    """Sinkhorn-scaled random positive matrix.

    Large ``heat`` flattens toward the product coupling; small ``heat``
    concentrates toward a permutation coupling.
    """
    if heat <= 0:
        raise ValueError(f"heat must be positive, got {heat}")
    rng = np.random.default_rng(seed)
    N = grid.size
    G = rng.standard_normal((N, N))
    return BistochasticMeasure(grid, sinkhorn_scale(G / heat))


def random_permutation_mixture(grid: TorusGrid, seed: int, k: int = 3) -> BistochasticMeasure:
    """Random convex combination of ``k`` random permutation couplings (sparse support)."""
    rng = np.random.default_rng(seed)
    N = grid.size
    w = rng.dirichlet(np.ones(k))
    m = np.zeros((N, N))
    for wi in w:
        m[np.arange(N), rng.permutation(N)] += wi / N
    return BistochasticMeasure(grid, m)
