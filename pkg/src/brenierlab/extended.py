"""Labelled generalized flows on the unit interval and the sawtooth family
along which the optimal labelled action jumps.

A labelled coupling is a probability measure on ``(label, position)``
pairs, both uniform on ``[0, 1]``. It is stored as atoms; the label grid has
``m`` cells with centers ``(k + 1/2) / m``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .coupling import transport_lp
from .flows import PathLattice

UNIFORM_TOL = 1e-9


@dataclass
class LabeledCoupling:
    """Atoms ``(labels[k], positions[k])`` with weights ``mass[k]``."""

    m: int
    labels: np.ndarray
    positions: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        self.mass = np.asarray(self.mass, dtype=float)
        if not (self.labels.shape == self.positions.shape == self.mass.shape) or self.labels.ndim != 1:
            raise ValueError("labels, positions and mass must be 1-d arrays of equal length")
        if np.any(self.mass < 0):
            raise ValueError("mass must be nonnegative")
        for name, x in (("labels", self.labels), ("positions", self.positions)):
            if np.any((x < 0) | (x > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")
        res = self.marginal_residual()
        if res > UNIFORM_TOL:
            raise ValueError(f"label or position marginal is not uniform (residual {res:.2e})")

    def label_cells(self) -> np.ndarray:
        return np.minimum((self.labels * self.m).astype(np.int64), self.m - 1)

    def position_cells(self) -> np.ndarray:
        return np.minimum((self.positions * self.m).astype(np.int64), self.m - 1)

    def marginal_residual(self) -> float:
        lab = np.bincount(self.label_cells(), weights=self.mass, minlength=self.m)
        pos = np.bincount(self.position_cells(), weights=self.mass, minlength=self.m)
        return float(max(np.max(np.abs(lab - 1 / self.m)), np.max(np.abs(pos - 1 / self.m))))

    def integrate(self, alpha) -> float:
        """``sum mass * alpha(label, position)`` for a vectorized test function."""
        return float(np.sum(self.mass * np.asarray(alpha(self.labels, self.positions), dtype=float)))

    def cell_matrix(self) -> np.ndarray:
        """Mass binned on (label cell, position cell)."""
        out = np.zeros((self.m, self.m))
        np.add.at(out, (self.label_cells(), self.position_cells()), self.mass)
        return out

    def label_law(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Positions and normalized weights of the atoms carrying label cell ``k``."""
        sel = self.label_cells() == k
        w = self.mass[sel]
        return self.positions[sel], w / w.sum()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["label", "position", "mass"])
        for row in zip(self.labels, self.positions, self.mass):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def label_centers(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


@dataclass
class CounterexampleFamily:
    """Member ``n`` of the sawtooth family (``n=None`` is the limit measure)."""

    n: int | None
    coupling: LabeledCoupling

    @property
    def m(self) -> int:
        return self.coupling.m

    @property
    def is_limit(self) -> bool:
        return self.n is None

    def reference_integral(self, alpha) -> float:
        """Midpoint-rule evaluation of the defining line integrals."""
        m = self.m
        if self.n is None:
            a = label_centers(m)
            return float(np.sum(0.5 * (alpha(a, a / 2) + alpha(a, 0.5 + a / 2))) / m)
        n = self.n
        x = (np.arange(m // (2 * n)) + 0.5) / m
        total = 0.0
        for i in range(n):
            total += np.sum(alpha(i / n + x, i / (2 * n) + x))
            total += np.sum(alpha((2 * i + 1) / (2 * n) + x, 0.5 + i / (2 * n) + x))
        return float(total / m)


def build_mu_infinity(m: int) -> CounterexampleFamily:
    """Two uniform segments ``{(a, a/2)}`` and ``{(a, 1/2 + a/2)}`` of mass 1/2 each."""
    if m < 4 or m % 2:
        raise ValueError(f"m must be even and >= 4, got {m}")
    a = label_centers(m)
    labels = np.concatenate([a, a])
    positions = np.concatenate([a / 2, 0.5 + a / 2])
    mass = np.full(2 * m, 0.5 / m)
    return CounterexampleFamily(None, LabeledCoupling(m, labels, positions, mass))


def build_mu_n(n: int, m: int) -> CounterexampleFamily:
    """Sawtooth coupling with ``2n`` segments of slope one.

    Labels in ``[i/n, i/n + 1/(2n))`` sit at ``a - i/(2n)`` (lower half) and
    labels in ``[(2i+1)/(2n), (i+1)/n)`` at ``1/2 + a - (i+1)/(2n)`` (upper
    half), so both marginals are uniform.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if m % (2 * n):
        raise ValueError(f"m={m} must be a multiple of 2n={2 * n}")
    a = label_centers(m)
    i = np.floor(a * n).astype(np.int64)
    lower = a < (2 * i + 1) / (2 * n)
    positions = np.where(lower, a - i / (2 * n), 0.5 + i / (2 * n) + (a - (2 * i + 1) / (2 * n)))
    return CounterexampleFamily(n, LabeledCoupling(m, a, positions, np.full(m, 1.0 / m)))


def sawtooth_lower_bound(n: int) -> float:
    """``(1/16) (1 - 1/n)^2``."""
    return (1 - 1 / n) ** 2 / 16


def _label_transport_cost(x, p, y, q) -> float:
    """Optimal ``E|X - Y|^2`` on the line between two discrete laws."""
    if len(y) == 1:
        return float(np.sum(p * (x - y[0]) ** 2))
    # monotone (quantile) coupling is optimal for convex costs on the line
    ix, iy = np.argsort(x), np.argsort(y)
    x, p, y, q = x[ix], p[ix].copy(), y[iy], q[iy].copy()
    i = j = 0
    cost = 0.0
    while i < len(x) and j < len(y):
        w = min(p[i], q[j])
        cost += w * (x[i] - y[j]) ** 2
        p[i] -= w
        q[j] -= w
        if p[i] <= 1e-15:
            i += 1
        if q[j] <= 1e-15:
            j += 1
    return cost


def solve_extended(
    mu: LabeledCoupling,
    nu: LabeledCoupling,
    lattice: PathLattice | None = None,
    incompressible: bool = False,
) -> float:
    """Optimal labelled action.

    Without ``incompressible`` every label moves freely: the value is the
    label average of ``1/2`` times the optimal quadratic transport cost from
    its initial law to its final law (interval distances). This is a lower
    bound for the incompressible problem and exact for the counterexample's
    per-label bound.

    With ``incompressible=True`` a ``lattice`` (torus geometry) is required
    and the labelled path LP is solved exactly with uniform interior
    marginals; positions are taken as the lattice cells of the atoms.
    """
    if mu.m != nu.m:
        raise ValueError("label grids differ")
    if incompressible:
        if lattice is None:
            raise ValueError("incompressible solve needs a path lattice")
        return solve_labeled_lattice(mu.cell_matrix(), nu.cell_matrix(), lattice)
    total = 0.0
    for k in range(mu.m):
        x, p = mu.label_law(k)
        y, q = nu.label_law(k)
        if len(x) == 0 or len(y) == 0:
            raise ValueError(f"label cell {k} carries no mass")
        total += 0.5 * _label_transport_cost(x, p, y, q) / mu.m
    return float(total)


def solve_labeled_lattice(mu_cells: np.ndarray, nu_cells: np.ndarray, lattice: PathLattice) -> float:
    N, T = lattice.grid.size, lattice.steps
    if mu_cells.shape != (N, N) or nu_cells.shape != (N, N):
        raise ValueError(f"labelled couplings must be {N} x {N} on this lattice")
    for c in (mu_cells, nu_cells):
        if np.max(np.abs(c.sum(axis=0) - 1 / N)) > UNIFORM_TOL or np.max(np.abs(c.sum(axis=1) - 1 / N)) > UNIFORM_TOL:
            raise ValueError("labelled couplings must have uniform marginals")
    paths = lattice.enumerate_paths()
    costs = lattice.path_costs(paths)
    la, pa = [], []
    for a in range(N):
        ok = (mu_cells[a, paths[:, 0]] > 0) & (nu_cells[a, paths[:, -1]] > 0)
        idx = np.nonzero(ok)[0]
        la.append(np.full(len(idx), a))
        pa.append(idx)
    lab, pidx = np.concatenate(la), np.concatenate(pa)
    P = len(lab)
    if P == 0:
        raise ValueError("no labelled path is compatible with both couplings")
    p = paths[pidx]
    rows = [lab * N + p[:, 0], N * N + lab * N + p[:, -1]]
    for t in range(1, T):
        rows.append(2 * N * N + (t - 1) * N + p[:, t])
    rows = np.concatenate(rows)
    cols = np.tile(np.arange(P), len(rows) // P)
    A = sparse.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(2 * N * N + (T - 1) * N, P))
    b = np.concatenate([mu_cells.ravel(), nu_cells.ravel(), np.full((T - 1) * N, 1.0 / N)])
    res = linprog(costs[pidx], A_eq=A, b_eq=b, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"labelled LP failed: {res.message}")
    return float(res.fun)


def identity_labeling(gamma_mass: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cell matrices of ``(Id, Id)`` and of ``gamma`` read as (label = start, end)."""
    N = gamma_mass.shape[0]
    return np.eye(N) / N, np.asarray(gamma_mass, dtype=float)


def mk_distance_labeled(mu: LabeledCoupling, nu: LabeledCoupling) -> float:
    """Quadratic transport distance on ``[0,1]^2`` between two labelled couplings."""
    cost = (mu.labels[:, None] - nu.labels[None, :]) ** 2 + (mu.positions[:, None] - nu.positions[None, :]) ** 2
    value, _ = transport_lp(mu.mass, nu.mass, cost)
    return math.sqrt(max(value, 0.0))


@dataclass
class SeriesRow:
    n: int | None
    dmk: float
    action_lower: float
    action_computed: float


@dataclass
class DiscontinuityReport:
    m: int
    rows: list[SeriesRow]

    @property
    def finite_rows(self) -> list[SeriesRow]:
        return [r for r in self.rows if r.n is not None]

    def distances_decreasing(self) -> bool:
        d = [r.dmk for r in self.finite_rows]
        return all(b < a for a, b in zip(d, d[1:]))

    def actions_bounded_below(self, floor: float = 1 / 64) -> bool:
        return all(r.action_computed >= floor for r in self.finite_rows if r.n >= 2)

    def meets_lower_bound(self) -> bool:
        return all(r.action_computed >= r.action_lower - 2 / self.m for r in self.finite_rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["n", "dmk", "action_lower", "action_computed"])
        for r in self.rows:
            w.writerow(["inf" if r.n is None else r.n, repr(r.dmk), repr(r.action_lower), repr(r.action_computed)])
        return buf.getvalue()


def discontinuity_series(n_list, m: int) -> DiscontinuityReport:
    """Distance to the limit and optimal labelled action for each ``n``,
    followed by the limit row ``(0, 0)``."""
    n_list = sorted(int(n) for n in n_list)
    if not n_list or n_list[0] < 1:
        raise ValueError("n_list must contain positive integers")
    limit = build_mu_infinity(m)
    rows = []
    for n in n_list:
        fam = build_mu_n(n, m)
        rows.append(
            SeriesRow(
                n,
                mk_distance_labeled(fam.coupling, limit.coupling),
                sawtooth_lower_bound(n),
                solve_extended(limit.coupling, fam.coupling),
            )
        )
    rows.append(SeriesRow(None, 0.0, 0.0, solve_extended(limit.coupling, limit.coupling)))
    return DiscontinuityReport(m, rows)
