"""Flow surgery: turn an optimal flow for ``(mu, rho)`` into an admissible
flow for ``(nu, rho_eps)`` and account for the action spent on the way.

Stages:

* ``t1_recondition`` moves endpoints along an optimal plan between ``mu`` and
  ``nu`` by an affine-in-time shift of each path;
* ``t2_diffuse`` rescales time onto ``[eps, 1 - eps]`` and spreads paths by
  kernel-distributed shifts with linear ramps at both ends;
* ``t3_straighten`` composes paths with the volume-matching map from the
  current density to ``rho_eps``;
* ``lattice_projection`` snaps to cell centers and repairs the remaining
  per-time marginal error by an exact transport split, so the output is an
  exactly admissible lattice flow.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._validation import check_density_path, check_lower_bound
from .brenier import DEFAULT_BUDGET, AdmissibilityReport, solve_exact, verify_admissible
from .coupling import BistochasticMeasure, TransportPlan4, mk_distance, transport_lp
from .dacmoser import StraighteningMap, flow_map
from .fields import DensityPath, e_norm, regularize_density, uniform_times
from .flows import GeneralizedFlow, density_of_flow
from .torus import Mollifier, min_image_disp, squared_distance_matrix

logger = logging.getLogger(__name__)

__all__ = [
    "SurgeryBudget",
    "SurgeryError",
    "SurgeryResult",
    "density_of_flow",
    "lattice_projection",
    "refined_steps",
    "surgery_pipeline",
    "t1_recondition",
    "t2_diffuse",
    "t3_straighten",
]

RHO_LOWER_BOUND = 0.75


class SurgeryError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SurgeryBudget:
    """Action increments of the three stages.

    ``estim3`` includes the final lattice projection, whose share is also
    reported separately as ``projection``.
    """

    estim1: float
    estim2: float
    estim3: float
    projection: float = 0.0

    @property
    def total(self) -> float:
        return self.estim1 + self.estim2 + self.estim3

    def negative_parts(self, tol: float = 1e-12) -> list[str]:
        return [k for k in ("estim1", "estim2", "estim3") if getattr(self, k) < -tol]

    def to_dict(self) -> dict:
        return {
            "estim1": self.estim1,
            "estim2": self.estim2,
            "estim3": self.estim3,
            "projection": self.projection,
            "total": self.total,
        }


def refined_steps(steps: int, eps: float, max_den: int = 1024) -> int:
    """Smallest multiple of ``steps`` on whose uniform grid ``eps`` is a node."""
    q = Fraction(eps).limit_denominator(max_den)
    if abs(float(q) - eps) > 1e-12:
        raise ValueError(f"eps={eps} is not a rational with denominator <= {max_den}")
    return math.lcm(steps, q.denominator)


def t1_recondition(eta: GeneralizedFlow, plan: TransportPlan4, tol: float = 1e-9) -> GeneralizedFlow:
    """Shift each path ``w`` with endpoints ``(x, y)`` to
    ``w(t) + (1 - t)(X - x) + t (Y - y)`` for every plan atom ``(x, y) -> (X, Y)``.

    The mass of the endpoint class ``(x, y)`` is split between atoms in
    proportion to the plan. Displacements use the minimal image, so the new
    endpoints are exactly the cell centers ``X`` and ``Y``.
    """
    coupling = eta.endpoint_coupling()
    mismatch = float(np.abs(plan.source_marginal() - coupling).sum())
    if mismatch > tol:
        raise ValueError(f"plan source marginal differs from the flow's endpoint coupling (TV {mismatch:.2e})")
    g = eta.grid
    cells = eta.cell_paths()
    key = cells[:, 0] * g.size + cells[:, -1]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    t = eta.time_grid[None, :, None]
    centers = g.cell_centers
    positions, masses = [], []
    for x, y, X, Y, m in zip(plan.x, plan.y, plan.X, plan.Y, plan.mass):
        k = x * g.size + y
        lo, hi = np.searchsorted(sorted_key, [k, k + 1])
        members = order[lo:hi]
        dX = min_image_disp(centers[x], centers[X])
        dY = min_image_disp(centers[y], centers[Y])
        positions.append(eta.positions[members] + (1 - t) * dX + t * dY)
        masses.append(eta.mass[members] * (m / coupling[x, y]))
    out = GeneralizedFlow(g, eta.time_grid, np.concatenate(positions), np.concatenate(masses))
    # endpoints sit on the target cell centers; remove float drift
    out.positions[:, 0] = centers[out.cell_paths()[:, 0]]
    out.positions[:, -1] = centers[out.cell_paths()[:, -1]]
    return out


def _on_grid(times: np.ndarray, s: float) -> bool:
    return bool(np.any(np.abs(times - s) < 1e-12))


def t2_diffuse(eta: GeneralizedFlow, eps: float, kernel: Mollifier | None = None) -> GeneralizedFlow:
    """Hold-move-return reparametrization mixed over kernel shifts ``v``.

    Each path becomes ``w(0) + (t/eps) v`` on ``[0, eps]``,
    ``w((t - eps)/(1 - 2 eps)) + v`` in the middle and
    ``w(1) + ((1 - t)/eps) v`` on ``[1 - eps, 1]``, weighted by the kernel.
    """
    if not 0.0 < eps <= 0.25:
        raise ValueError(f"eps must lie in (0, 1/4], got {eps}")
    times = eta.time_grid
    if not (_on_grid(times, eps) and _on_grid(times, 1 - eps)):
        raise ValueError(f"eps={eps} and 1-eps must be observation times; refine the time grid")
    kernel = kernel if kernel is not None else Mollifier(eps, eta.grid)
    if kernel.grid != eta.grid:
        raise ValueError("kernel and flow grids differ")
    lo = times <= eps + 1e-12
    hi = times >= 1 - eps - 1e-12
    mid = ~(lo | hi)
    base = np.empty_like(eta.positions)
    base[:, lo] = eta.positions[:, :1]
    base[:, hi] = eta.positions[:, -1:]
    if mid.any():
        base[:, mid] = eta.position_at((times[mid] - eps) / (1 - 2 * eps))
    ramp = np.where(lo, times / eps, np.where(hi, (1 - times) / eps, 1.0))
    positions, masses = [], []
    for v, w in zip(kernel.shifts(), kernel.weights):
        positions.append(base + ramp[None, :, None] * v)
        masses.append(eta.mass * w)
    out = GeneralizedFlow(eta.grid, times, np.concatenate(positions), np.concatenate(masses))
    if kernel.is_identity:
        out.positions[:, lo] = eta.positions[:, :1]
        out.positions[:, hi] = eta.positions[:, -1:]
    return out


def t3_straighten(
    eta: GeneralizedFlow, target: DensityPath, ode_steps: int = 32
) -> tuple[GeneralizedFlow, StraighteningMap]:
    """Compose every path with the map pushing the flow's density onto ``target``.

    The flow's density is measured with cloud-in-cell deposition, which sees
    off-grid observations without rounding artifacts.
    """
    Q = density_of_flow(eta, "cic")
    if not np.allclose(Q.time_grid, target.time_grid):
        raise ValueError("target density uses a different time grid")
    check_lower_bound(Q.frames, 0.5, "flow density")
    check_lower_bound(target.frames, 0.5, "target density")
    if not np.allclose(Q.frames[[0, -1]], target.frames[[0, -1]], atol=1e-12):
        raise ValueError("flow density and target differ at the end times")
    psi = flow_map(Q, target, ode_steps)
    if psi.is_identity():
        return eta, psi
    new = np.stack([psi.apply(eta.positions[:, k], k) for k in range(len(eta.time_grid))], axis=1)
    return GeneralizedFlow(eta.grid, eta.time_grid, new, eta.mass), psi


def lattice_projection(eta: GeneralizedFlow, target: DensityPath) -> GeneralizedFlow:
    """Snap to cell centers, then split path mass at each interior time along
    an optimal plan from the snapped marginal to ``target``.

    Endpoint cells are left untouched, and every interior marginal of the
    result equals the target's cell masses up to round-off.
    """
    flow = eta.merged()
    g = flow.grid
    cost = squared_distance_matrix(g)
    goal = target.cell_masses()
    goal = goal / goal.sum(axis=1, keepdims=True) * flow.total_mass
    for k in range(1, len(flow.time_grid) - 1):
        q = flow.cell_marginals()[k]
        if np.max(np.abs(q - goal[k])) <= 1e-15:
            continue
        src = np.nonzero(q > 0)[0]
        _, plan = transport_lp(q[src], goal[k], cost[src])
        row_of = -np.ones(g.size, dtype=np.int64)
        row_of[src] = np.arange(len(src))
        split = plan / q[src][:, None]
        cells = flow.cell_paths()
        rows = split[row_of[cells[:, k]]]
        p, dest = np.nonzero(rows > 0)
        new_cells = cells[p].copy()
        new_cells[:, k] = dest
        flow = GeneralizedFlow(g, flow.time_grid, g.cell_centers[new_cells], flow.mass[p] * rows[p, dest])
        flow = flow.merged()
    return flow


@dataclass
class SurgeryResult:
    flow: GeneralizedFlow
    budget: SurgeryBudget
    certified_action: float
    base_action: float
    dmk: float
    eps: float
    target: DensityPath
    residuals: AdmissibilityReport
    conditions: dict
    straightening: StraighteningMap
    stage_actions: dict = field(default_factory=dict)

    def to_report(self) -> dict:
        return {
            "budget": self.budget.to_dict(),
            "conditions": self.conditions,
            "certified_action": self.certified_action,
            "base_action": self.base_action,
            "dmk": self.dmk,
            "eps": self.eps,
            "steps": len(self.flow.time_grid) - 1,
            "norm_excess": self.straightening.norm_excess,
            "stage_actions": self.stage_actions,
            "residuals": self.residuals.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_report(), indent=2)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SurgeryError:
        raise
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        raise SurgeryError(name, exc) from exc


def surgery_pipeline(
    mu: BistochasticMeasure,
    nu: BistochasticMeasure,
    rho: DensityPath | None,
    eps: float,
    steps: int = 2,
    ode_steps: int = 32,
    smallness_constant: float = 1.0,
    budget: int = DEFAULT_BUDGET,
) -> SurgeryResult:
    """Admissible flow for ``(nu, rho_eps)`` built from an optimal flow for ``(mu, rho)``.

    ``rho`` (default: uniform on ``steps`` steps) must be at least 3/4
    everywhere. The output lives on the refined uniform grid with
    ``refined_steps(T, eps)`` steps, on which ``rho_eps`` is evaluated.
    """
    if rho is None:
        rho = DensityPath.uniform(mu.grid, steps)
    _stage("input", check_density_path, rho)
    _stage("input", check_lower_bound, rho.frames, RHO_LOWER_BOUND, "rho")
    if not 0.0 < eps <= 0.25:
        raise SurgeryError("input", ValueError(f"eps must lie in (0, 1/4], got {eps}"))
    T = len(rho.time_grid) - 1
    T_out = _stage("input", refined_steps, T, eps)
    times = uniform_times(T_out)

    base = _stage("solve", solve_exact, mu, rho, budget=budget)
    eta0 = base.flow.resampled(times)
    a0 = base.action

    dmk, plan = _stage("t1", mk_distance, mu, nu)
    eta1 = _stage("t1", t1_recondition, eta0, plan)
    a1 = eta1.action()

    eta2 = _stage("t2", t2_diffuse, eta1, eps)
    a2 = eta2.action()

    target = _stage("t3", regularize_density, rho, eps, times)
    eta3, psi = _stage("t3", t3_straighten, eta2, target, ode_steps)
    a3 = eta3.action()
    out = _stage("projection", lattice_projection, eta3, target)
    certified = out.action()

    residuals = verify_admissible(out, nu, target)
    n_rho = e_norm(target)
    diam = math.sqrt(mu.grid.dim) / 2
    conditions = {
        "rho_lower_bound": float(rho.frames.min()),
        "action_bound_lhs": math.sqrt(max(a0, 0.0)),
        "action_bound_rhs": 2 * diam,
        "smallness_lhs": smallness_constant * (1 + n_rho) * dmk / eps ** (mu.grid.dim + 2),
        "smallness_rhs": 0.25,
        "norm_rho_eps": n_rho,
    }
    conditions["smallness_ok"] = conditions["smallness_lhs"] <= 0.25
    conditions["action_bound_ok"] = conditions["action_bound_lhs"] <= conditions["action_bound_rhs"]
    budget_ = SurgeryBudget(a1 - a0, a2 - a1, certified - a2, projection=certified - a3)
    logger.info("surgery eps=%g dmk=%.4g certified=%.6g budget=%s", eps, dmk, certified, budget_.to_dict())
    return SurgeryResult(
        flow=out,
        budget=budget_,
        certified_action=certified,
        base_action=a0,
        dmk=dmk,
        eps=eps,
        target=target,
        residuals=residuals,
        conditions=conditions,
        straightening=psi,
        stage_actions={"base": a0, "t1": a1, "t2": a2, "t3": a3, "certified": certified},
    )
