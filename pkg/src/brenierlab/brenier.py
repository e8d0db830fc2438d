"""Solvers for the discrete generalized-flow problem with prescribed endpoint
coupling and prescribed per-time densities.

Two routes are provided: an exact linear program over enumerated lattice
paths (which also yields the pressure as the dual of the density
constraints) and an entropic multimarginal Sinkhorn solver on a
chain-factored path measure.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import brentq, linprog
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_density_path, check_same_grid
from .coupling import BistochasticMeasure
from .fields import DensityPath, FieldPath
from .flows import ChainFlow, GeneralizedFlow, PathLattice, PressureField

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 10**6
DEFAULT_REG_SCHEDULE = (0.2, 0.1, 0.05, 0.025)


class BudgetExceeded(ValueError):
    """The lattice has more paths than the enumeration budget allows."""


class InfeasibleProblem(RuntimeError):
    pass


@dataclass
class ExactSolution:
    action: float
    flow: GeneralizedFlow
    pressure: PressureField
    endpoint_duals: np.ndarray
    dual_objective: float
    lattice: PathLattice

    @property
    def duality_gap(self) -> float:
        return abs(self.action - self.dual_objective)


@dataclass
class EntropicSolution:
    action: float
    flow: ChainFlow
    pressure: PressureField
    stats: dict = field(default_factory=dict)


@dataclass
class AdmissibilityReport:
    endpoint_residual: float
    marginal_residuals: np.ndarray
    tol: float

    @property
    def max_residual(self) -> float:
        return float(max(self.endpoint_residual, np.max(self.marginal_residuals, initial=0.0)))

    @property
    def ok(self) -> bool:
        return self.max_residual <= self.tol

    def to_dict(self) -> dict:
        return {
            "endpoint_residual": self.endpoint_residual,
            "marginal_residuals": np.asarray(self.marginal_residuals).tolist(),
            "max_residual": self.max_residual,
            "ok": self.ok,
        }


@dataclass
class LeastActionReport:
    worst_slack: float
    min_reduced_cost: float
    max_charged_reduced_cost: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.worst_slack <= self.tol and self.min_reduced_cost >= -self.tol


def _lattice_for(gamma: BistochasticMeasure, rho: DensityPath) -> PathLattice:
    check_same_grid(gamma.grid, rho.grid)
    steps = len(rho.time_grid) - 1
    if not np.allclose(rho.time_grid, np.linspace(0, 1, steps + 1)):
        raise ValueError("density path must use a uniform time grid")
    return PathLattice(gamma.grid, steps)


def verify_admissible(eta, gamma: BistochasticMeasure, rho: DensityPath, tol: float = 1e-9) -> AdmissibilityReport:
    """Total-variation residuals of the endpoint and per-time constraints."""
    check_same_grid(gamma.grid, rho.grid)
    if len(eta.time_grid) != len(rho.time_grid) or not np.allclose(eta.time_grid, rho.time_grid):
        raise ValueError("flow and density path use different time grids")
    ep = float(np.abs(eta.endpoint_coupling() - gamma.mass).sum())
    marg = np.abs(eta.cell_marginals() - rho.cell_masses()).sum(axis=1)
    return AdmissibilityReport(ep, marg, tol)


def solve_exact(
    gamma: BistochasticMeasure,
    rho: DensityPath | None = None,
    steps: int = 4,
    budget: int = DEFAULT_BUDGET,
) -> ExactSolution:
    """Exact minimal action by linear programming over all lattice paths.

    Paths whose endpoint pair is not charged by ``gamma`` are excluded from
    the program; their endpoint duals are set to the largest value keeping
    the dual feasible. The pressure is the dual of the interior density
    constraints divided by ``dt``, shifted to zero mean per frame (the shift
    is absorbed in the endpoint duals).
    """
    if rho is None:
        rho = DensityPath.uniform(gamma.grid, steps)
    check_density_path(rho)
    lattice = _lattice_for(gamma, rho)
    if lattice.n_paths > budget:
        raise BudgetExceeded(f"{lattice.n_paths} paths exceed the enumeration budget {budget}")
    N, T = lattice.grid.size, lattice.steps

    all_paths = lattice.enumerate_paths()
    all_costs = lattice.path_costs(all_paths)
    charged_pair = gamma.mass[all_paths[:, 0], all_paths[:, -1]] > 0
    paths, costs = all_paths[charged_pair], all_costs[charged_pair]
    P = len(paths)

    sx, sy = gamma.support()
    pair_row = -np.ones((N, N), dtype=np.int64)
    pair_row[sx, sy] = np.arange(len(sx))
    n_pair = len(sx)
    rows = [pair_row[paths[:, 0], paths[:, -1]]]
    for t in range(1, T):
        rows.append(n_pair + (t - 1) * N + paths[:, t])
    rows = np.concatenate(rows)
    cols = np.tile(np.arange(P), T)
    A = sparse.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_pair + (T - 1) * N, P))
    masses = rho.cell_masses()
    b = np.concatenate([gamma.mass[sx, sy], masses[1:T].ravel()])

    res = linprog(costs, A_eq=A, b_eq=b, bounds=(0, None), method="highs-ds")
    if res.status == 2:
        raise InfeasibleProblem(res.message)
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    y = np.asarray(res.eqlin.marginals)
    z_pairs, pot = y[:n_pair], y[n_pair:].reshape(T - 1, N)

    # zero-mean gauge for the interior potentials
    shift = pot.mean(axis=1)
    pot = pot - shift[:, None]
    z_pairs = z_pairs + shift.sum()

    z = np.full((N, N), np.inf)
    z[sx, sy] = z_pairs
    # endpoint duals of uncharged pairs: tightest feasible value
    reduced = all_costs - sum(pot[t - 1][all_paths[:, t]] for t in range(1, T))
    free = ~charged_pair
    np.minimum.at(z, (all_paths[free, 0], all_paths[free, -1]), reduced[free])
    unset = np.isinf(z)
    z[unset & (gamma.mass == 0)] = 0.0

    x = np.clip(res.x, 0.0, None)
    keep = x > 1e-15
    flow = GeneralizedFlow.from_cell_paths(lattice, paths[keep], x[keep])
    pressure = PressureField.from_potentials(lattice.grid, T, pot)
    dual_obj = float(z_pairs @ gamma.mass[sx, sy] + np.sum(pot * masses[1:T]))
    return ExactSolution(float(res.fun), flow, pressure, z, dual_obj, lattice)


def _log_target(m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(m)


def solve_entropic(
    gamma: BistochasticMeasure,
    rho: DensityPath | None = None,
    reg: float = 0.05,
    max_iter: int = 5000,
    tol: float = 1e-9,
    steps: int = 4,
) -> EntropicSolution:
    """Entropy-regularized problem solved by iterative proportional fitting.

    Minimizes ``action + reg * KL(eta | chain)`` where the reference chain has
    transition kernel ``exp(-step_cost / reg)``. The endpoint potential and one
    potential per interior time are rescaled in turn until every interior
    marginal is within ``tol`` (total variation) of its target; the endpoint
    coupling is matched exactly after each sweep.
    """
    if reg <= 0:
        raise ValueError(f"reg must be positive, got {reg}")
    if rho is None:
        rho = DensityPath.uniform(gamma.grid, steps)
    check_density_path(rho)
    lattice = _lattice_for(gamma, rho)
    N, T = lattice.grid.size, lattice.steps
    targets = rho.cell_masses()
    log_targets = _log_target(targets)
    log_gamma = _log_target(gamma.mass)

    flow = ChainFlow(lattice, reg, log_gamma.copy(), np.zeros((T + 1, N)))
    logK = flow.log_kernel
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        B = flow.backward()
        F = np.where(np.eye(N, dtype=bool), 0.0, -np.inf)
        for t in range(1, T):
            F = logsumexp((F + flow.log_u[t - 1][None, :])[:, :, None] + logK[None, :, :], axis=1)
            lm = flow.log_u[t] + logsumexp(flow.log_w[:, None, :] + F[:, :, None] + B[t][None, :, :], axis=(0, 2))
            flow.log_u[t] = np.where(np.isneginf(log_targets[t]), -np.inf, flow.log_u[t] + log_targets[t] - lm)
        F = logsumexp((F + flow.log_u[T - 1][None, :])[:, :, None] + logK[None, :, :], axis=1)
        flow.log_w = np.where(np.isneginf(log_gamma), -np.inf, log_gamma - F)
        marg = flow.cell_marginals()
        residual = float(np.max(np.abs(marg - targets).sum(axis=1)))
        if residual < tol:
            break
    converged = residual < tol
    if not converged:
        warnings.warn(f"entropic solver did not converge in {max_iter} sweeps (residual {residual:.2e})")
    pressure = PressureField.from_potentials(lattice.grid, T, reg * flow.log_u[1:T])
    stats = {"iterations": it, "residual": residual, "converged": converged, "reg": reg}
    logger.debug("entropic solve reg=%g: %s", reg, stats)
    return EntropicSolution(flow.action(), flow, pressure, stats)


def extrapolate_to_zero(regs, values) -> float:
    """Estimate the ``reg -> 0`` limit of the entropic action.

    On a finite lattice the entropic action approaches the unregularized one
    at an exponential rate, ``A(reg) ~ A0 + c exp(-kappa / reg)``. The three
    smallest regularizations determine ``kappa`` through the ratio of
    consecutive differences, and the geometric tail is added back. When the
    data do not fit that model (non-monotone values, too few points) the value
    at the smallest ``reg`` is returned.
    """
    order = np.argsort(np.asarray(regs, dtype=float))[::-1]
    r = np.asarray(regs, dtype=float)[order]
    v = np.asarray(values, dtype=float)[order]
    if len(r) < 3:
        return float(v[-1])
    (r1, r2, r3), (v1, v2, v3) = r[-3:], v[-3:]
    d1, d2 = v1 - v2, v2 - v3
    a, b = 1 / r2 - 1 / r1, 1 / r3 - 1 / r2
    if d1 <= 0 or d2 <= 0:
        return float(v3)
    q = d2 / d1
    if not q < b / a:
        return float(v3)

    def ratio(kappa):
        return np.exp(-kappa * a) * (-np.expm1(-kappa * b)) / (-np.expm1(-kappa * a)) - q

    hi = 1.0
    while ratio(hi) > 0:
        hi *= 2
    kappa = brentq(ratio, 1e-12, hi, xtol=1e-14)
    return float(v3 - d2 / np.expm1(kappa * b))


def extrapolated_entropic_action(
    gamma: BistochasticMeasure,
    rho: DensityPath | None = None,
    regs=DEFAULT_REG_SCHEDULE,
    steps: int = 4,
    **kwargs,
) -> tuple[float, list[EntropicSolution]]:
    sols = [solve_entropic(gamma, rho, reg=r, steps=steps, **kwargs) for r in regs]
    return extrapolate_to_zero(regs, [s.action for s in sols]), sols


def _interior_frames(r, pressure: PressureField) -> np.ndarray:
    if isinstance(r, FieldPath):
        frames = r.frames
        if len(frames) == len(pressure.time_grid) + 2:
            frames = frames[1:-1]
    else:
        frames = np.asarray(r, dtype=float)
    if frames.shape != pressure.frames.shape:
        raise ValueError(f"deviation frames {frames.shape} do not match pressure {pressure.frames.shape}")
    return frames


def extract_pressure_pairing(p: PressureField, r) -> float:
    """``<p, r> = sum over interior times and cells of p * r * dt * cell volume``.

    ``r`` is a density deviation ``R - 1``: either an array of interior frames
    or a field path on the full time grid (end frames ignored).
    """
    frames = _interior_frames(r, p)
    axes = tuple(range(1, 1 + p.grid.dim))
    means = frames.mean(axis=axes) if len(frames) else np.zeros(0)
    scale = max(1.0, float(np.max(np.abs(frames), initial=0.0)))
    if np.any(np.abs(means) > 1e-9 * scale):
        raise ValueError("density deviation frames must have zero mean")
    return float(np.sum(p.frames * frames) * p.dt * p.grid.cell_volume)


def verify_least_action(
    flow: GeneralizedFlow,
    pressure: PressureField,
    endpoint_duals: np.ndarray,
    tol: float = 1e-9,
) -> LeastActionReport:
    """Complementary slackness of an exact solve: every charged path minimizes
    ``action - sum_t p(t, w(t)) dt`` among lattice paths with the same endpoints."""
    grid = flow.grid
    T = len(flow.time_grid) - 1
    lattice = PathLattice(grid, T)
    paths = lattice.enumerate_paths()
    pot = pressure.frames.reshape(T - 1, grid.size) * pressure.dt

    def reduced_cost(p):
        return lattice.path_costs(p) - sum(pot[t - 1][p[:, t]] for t in range(1, T)) - endpoint_duals[p[:, 0], p[:, -1]]

    rc_all = reduced_cost(paths)
    N = grid.size
    best = np.full((N, N), np.inf)
    np.minimum.at(best, (paths[:, 0], paths[:, -1]), rc_all)
    charged = flow.cell_paths()
    rc_charged = reduced_cost(charged)
    slack = rc_charged - best[charged[:, 0], charged[:, -1]]
    return LeastActionReport(
        worst_slack=float(np.max(slack, initial=0.0)),
        min_reduced_cost=float(np.min(rc_all)),
        max_charged_reduced_cost=float(np.max(np.abs(rc_charged), initial=0.0)),
        tol=tol,
    )


def lagrange_gap(
    gamma: BistochasticMeasure,
    pressure: PressureField,
    H: GeneralizedFlow,
    base_action: float,
    tol: float = 1e-9,
) -> float:
    """``A(H) - A(gamma) - <p, R - 1>`` for a competitor ``H`` with endpoint
    coupling ``gamma`` and density ``R`` (nonnegative for exact duals)."""
    mismatch = float(np.abs(H.endpoint_coupling() - gamma.mass).sum())
    if mismatch > tol:
        raise ValueError(f"competitor flow does not have the prescribed endpoints (TV {mismatch:.2e})")
    R = H.density().frames[1:-1]
    return H.action() - base_action - extract_pressure_pairing(pressure, R - 1.0)


class BrenierSolver(BaseEstimator):
    """Estimator-style front end for the two solvers.

    ``fit(gamma, rho)`` solves the problem and exposes ``action_``,
    ``flow_``, ``pressure_`` and ``stats_``; the exact route also sets
    ``endpoint_duals_``. With ``method="extrapolated"`` the entropic solver
    runs over ``reg_schedule`` and ``action_`` is the extrapolated value.
    """

    def __init__(
        self,
        method: str = "exact",
        steps: int = 4,
        reg: float = 0.05,
        reg_schedule=DEFAULT_REG_SCHEDULE,
        max_iter: int = 5000,
        tol: float = 1e-9,
        budget: int = DEFAULT_BUDGET,
    ):
        self.method = method
        self.steps = steps
        self.reg = reg
        self.reg_schedule = reg_schedule
        self.max_iter = max_iter
        self.tol = tol
        self.budget = budget

    def fit(self, gamma: BistochasticMeasure, rho: DensityPath | None = None):
        if self.method == "exact":
            sol = solve_exact(gamma, rho, steps=self.steps, budget=self.budget)
            self.endpoint_duals_ = sol.endpoint_duals
            self.stats_ = {"dual_objective": sol.dual_objective, "duality_gap": sol.duality_gap}
        elif self.method == "entropic":
            sol = solve_entropic(gamma, rho, reg=self.reg, max_iter=self.max_iter, tol=self.tol, steps=self.steps)
            self.stats_ = sol.stats
        elif self.method == "extrapolated":
            value, sols = extrapolated_entropic_action(
                gamma, rho, regs=self.reg_schedule, steps=self.steps, max_iter=self.max_iter, tol=self.tol
            )
            sol = sols[-1]
            self.stats_ = {"schedule": list(self.reg_schedule), "actions": [s.action for s in sols]}
            self.action_ = value
            self.flow_, self.pressure_ = sol.flow, sol.pressure
            self.solution_ = sol
            return self
        else:
            raise ValueError(f"unknown method {self.method!r}")
        self.solution_ = sol
        self.action_ = sol.action
        self.flow_ = sol.flow
        self.pressure_ = sol.pressure
        return self

    def pairing(self, r) -> float:
        """Pressure paired with a density deviation (see :func:`extract_pressure_pairing`)."""
        check_is_fitted(self, "pressure_")
        return extract_pressure_pairing(self.pressure_, r)
