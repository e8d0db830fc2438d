"""Empirical studies: Hölder envelopes of the optimal action and of the
pressure, the finite-diameter check and the labelled counterexample.

Every runner takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentReport` whose rows are plain dicts (CSV-ready).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import kendalltau

from .brenier import lagrange_gap, extract_pressure_pairing, solve_entropic, solve_exact, extrapolated_entropic_action
from .coupling import gamma_identity, gamma_shift, mk_distance, random_bistochastic
from .extended import discontinuity_series
from .fields import FieldPath, divergence, e_norm, regularize_density
from .flows import perturb_flow, split_to_lattice
from .surgery import SurgeryError, surgery_pipeline
from .torus import TorusGrid

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10
KENDALL_ALPHA = 0.05


def config_hash(config: dict) -> str:
    """Short sha256 of the canonical JSON form of a config mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    dim: int = 1
    n: int = 4
    steps: int = 2
    pressure_steps: int = 4
    solver: str = "exact"
    reg: float = 0.05
    reg_schedule: tuple = (0.2, 0.1, 0.05, 0.025)
    samples: int = 20
    test_fields: int = 20
    seed: int = 0
    tau: float = 0.2
    blend_range: tuple = (1e-3, 0.5)
    epsilons: tuple = (0.25,)
    deltas: tuple = (0.01, 0.02, 0.04, 0.08)
    n_list: tuple = (1, 2, 4, 8)
    m: int = 32
    budget: int = 10**6
    out_dir: str = "results"

    def __post_init__(self):
        if not 0.0 < self.tau < 0.25:
            raise ValueError(f"tau must lie in (0, 1/4), got {self.tau}")
        for name in ("reg_schedule", "epsilons", "deltas"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be positive")
            setattr(self, name, vals)
        if any(b >= a for a, b in zip(self.reg_schedule, self.reg_schedule[1:])):
            raise ValueError("reg_schedule must be decreasing")
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be decreasing")
        self.blend_range = tuple(float(v) for v in self.blend_range)
        self.n_list = tuple(int(v) for v in self.n_list)
        if self.solver not in ("exact", "entropic"):
            raise ValueError(f"solver must be 'exact' or 'entropic', got {self.solver!r}")

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.dim, self.n)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class ExperimentReport:
    name: str
    rows: list[dict]
    summary: dict
    passed: bool
    extra_tables: dict = field(default_factory=dict)

    def to_csv(self, rows=None) -> str:
        rows = self.rows if rows is None else rows
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        return buf.getvalue()

    def write(self, out_dir, config: ExperimentConfig) -> Path:
        """Write ``<name>.csv`` (plus extra tables) and ``<name>_manifest.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = [f"{self.name}.csv"]
        (out / files[0]).write_text(self.to_csv())
        for key, rows in self.extra_tables.items():
            fname = f"{self.name}_{key}.csv"
            (out / fname).write_text(self.to_csv(rows))
            files.append(fname)
        manifest = {
            "experiment": self.name,
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "seed": config.seed,
            "passed": self.passed,
            "summary": self.summary,
            "files": files,
        }
        path = out / f"{self.name}_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, default=float))
        return path


def holder_exponent_action(dim: int) -> float:
    return 1.0 / (dim + 3)


def holder_exponent_pressure(dim: int) -> float:
    return 1.0 / (2 + 2 * (dim + 1) * (dim + 2))


def trend_test(dmk, envelope) -> dict:
    """One-sided Kendall test for an envelope that grows as ``dmk -> 0``.

    A growing envelope means a negative rank correlation with ``dmk``; the
    check fails when that correlation is significant at 5%.
    """
    dmk = np.asarray(dmk, dtype=float)
    envelope = np.asarray(envelope, dtype=float)
    res = kendalltau(dmk, envelope, alternative="less")
    tau = float(res.statistic) if np.isfinite(res.statistic) else 0.0
    p = float(res.pvalue) if np.isfinite(res.pvalue) else 1.0
    return {"kendall_tau": tau, "p_value": p, "no_growth": p >= KENDALL_ALPHA}


def _loglog_slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def sample_pairs(cfg: ExperimentConfig, rng: np.random.Generator):
    """``(mu, nu, s)`` with ``nu = (1 - s) mu + s * other`` and ``s`` log-spaced."""
    if cfg.samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {cfg.samples}")
    lo, hi = cfg.blend_range
    blends = np.geomspace(hi, lo, cfg.samples)
    grid = cfg.grid
    out = []
    for s in blends:
        a, b = (int(v) for v in rng.integers(0, 2**31, size=2))
        mu = random_bistochastic(grid, a)
        other = random_bistochastic(grid, b)
        out.append((mu, mu.blend(other, float(s)), float(s)))
    return out


def _action(cfg: ExperimentConfig, gamma, steps: int) -> float:
    if cfg.solver == "exact":
        return solve_exact(gamma, steps=steps, budget=cfg.budget).action
    return extrapolated_entropic_action(gamma, regs=cfg.reg_schedule, steps=steps)[0]


def run_action_holder(cfg: ExperimentConfig) -> ExperimentReport:
    rng = np.random.default_rng(cfg.seed)
    alpha = holder_exponent_action(cfg.dim)
    rows = []
    for k, (mu, nu, s) in enumerate(sample_pairs(cfg, rng)):
        a_mu = _action(cfg, mu, cfg.steps)
        a_nu = _action(cfg, nu, cfg.steps)
        dmk, _ = mk_distance(mu, nu)
        diff = abs(a_nu - a_mu)
        rows.append(
            {
                "pair": k,
                "blend": s,
                "dmk": dmk,
                "action_mu": a_mu,
                "action_nu": a_nu,
                "delta_action": diff,
                "envelope": diff / dmk**alpha if dmk > 0 else 0.0,
            }
        )
    rows.sort(key=lambda r: r["dmk"])
    dmk = [r["dmk"] for r in rows]
    env = [r["envelope"] for r in rows]
    trend = trend_test(dmk, env)
    slope = _loglog_slope(dmk, [r["delta_action"] for r in rows])
    summary = {
        "exponent": alpha,
        "envelope_constant": float(max(env)),
        "loglog_slope": slope,
        "slope_ok": bool(slope >= alpha - 0.1),
        **trend,
    }
    return ExperimentReport("action_holder", rows, summary, bool(trend["no_growth"] and np.isfinite(max(env))))


def random_test_fields(grid: TorusGrid, times, tau: float, count: int, rng) -> list[FieldPath]:
    """Random vector fields vanishing for ``t <= tau`` and ``t >= 1 - tau``, scaled to ``N = 1``."""
    times = np.asarray(times, dtype=float)
    active = (times > tau + 1e-12) & (times < 1 - tau - 1e-12)
    if not active.any():
        raise ValueError(f"no observation time lies in ({tau}, {1 - tau})")
    out = []
    for _ in range(count):
        frames = np.zeros((len(times),) + grid.shape + (grid.dim,))
        frames[active] = rng.standard_normal((int(active.sum()),) + grid.shape + (grid.dim,))
        xi = FieldPath(grid, times, frames, tau=tau)
        out.append(FieldPath(grid, times, frames / e_norm(xi), tau=tau))
    return out


def _divergence_frames(xi: FieldPath) -> np.ndarray:
    return np.stack([divergence(f, xi.grid) for f in xi.frames[1:-1]])


def _entropic_pressure(cfg, gamma):
    return solve_entropic(gamma, reg=cfg.reg, steps=cfg.pressure_steps, tol=1e-10, max_iter=20000).pressure


def run_pressure_holder(cfg: ExperimentConfig) -> ExperimentReport:
    """Envelope of ``sup_xi |<p_nu - p_mu, div xi>|`` against ``dmk^beta``.

    Pressures are the entropic selections at ``cfg.reg``; the LP-dual pairing
    gap is logged next to it.
    """
    rng = np.random.default_rng(cfg.seed)
    beta = holder_exponent_pressure(cfg.dim)
    grid = cfg.grid
    T = cfg.pressure_steps
    times = np.linspace(0, 1, T + 1)
    fields = random_test_fields(grid, times, cfg.tau, cfg.test_fields, rng)
    divs = [_divergence_frames(xi) for xi in fields]
    pairs = sample_pairs(cfg, rng)
    rows = []
    for k, (mu, nu, s) in enumerate(pairs):
        p_mu, p_nu = _entropic_pressure(cfg, mu), _entropic_pressure(cfg, nu)
        lp_mu = solve_exact(mu, steps=T, budget=cfg.budget).pressure
        lp_nu = solve_exact(nu, steps=T, budget=cfg.budget).pressure
        dmk, _ = mk_distance(mu, nu)
        gap = max(abs(extract_pressure_pairing(p_nu, r) - extract_pressure_pairing(p_mu, r)) for r in divs)
        lp_gap = max(abs(extract_pressure_pairing(lp_nu, r) - extract_pressure_pairing(lp_mu, r)) for r in divs)
        rows.append(
            {
                "pair": k,
                "blend": s,
                "dmk": dmk,
                "pairing_gap": gap,
                "lp_pairing_gap": lp_gap,
                "envelope": gap / dmk**beta if dmk > 0 else 0.0,
            }
        )
    order = np.argsort([r["dmk"] for r in rows])
    half = rows[: len(rows) // 2]
    rows = [rows[i] for i in order]
    env = [r["envelope"] for r in rows]
    trend = trend_test([r["dmk"] for r in rows], env)
    summary = {
        "exponent": beta,
        "envelope_constant": float(max(env)),
        "envelope_half_sample": float(max(r["envelope"] for r in half)),
        "loglog_slope": _loglog_slope([r["dmk"] for r in rows], [r["pairing_gap"] for r in rows]),
        **trend,
    }
    chain = pressure_chain_diagnostics(cfg, pairs[0][0], pairs[0][1], fields[0])
    summary["chain"] = chain["summary"]
    report = ExperimentReport("pressure_holder", rows, summary, bool(trend["no_growth"] and np.isfinite(max(env))))
    report.extra_tables["chain"] = chain["rows"]
    return report


def pressure_chain_diagnostics(cfg: ExperimentConfig, mu, nu, xi: FieldPath) -> dict:
    """Perturbation, multiplier and surgery checks along a ``delta`` sweep.

    For each ``delta`` the optimal flow for ``mu`` is displaced by
    ``delta * xi`` and split back onto the lattice. The rows record the
    multiplier gap of that competitor, the multiplier inequality for the
    regularized density ``rho_delta^eps`` and, when its preconditions hold,
    the surgery bound at ``(rho_delta, eps)``.
    """
    T = cfg.pressure_steps
    base = solve_exact(mu, steps=T, budget=cfg.budget)
    eps = max(cfg.epsilons)
    rows = []
    for delta in cfg.deltas:
        H = split_to_lattice(perturb_flow(base.flow, xi.frames, delta))
        gap = lagrange_gap(mu, base.pressure, H, base.action)
        rho_delta = H.density()
        rho_eps = regularize_density(rho_delta, eps)
        a_eps = solve_exact(mu, rho_eps, budget=cfg.budget).action
        mult = a_eps - base.action - extract_pressure_pairing(base.pressure, rho_eps.frames[1:-1] - 1.0)
        row = {"delta": delta, "lagrange_gap": gap, "multiplier_gap_rho_eps": mult, "rho_delta_min": float(rho_delta.frames.min())}
        try:
            res = surgery_pipeline(mu, nu, rho_delta, eps, budget=cfg.budget)
            row.update(
                surgery_certified=res.certified_action,
                surgery_excess=res.budget.total,
                surgery_residual=res.residuals.max_residual,
                surgery_status="ok",
            )
        except SurgeryError as exc:
            row.update(surgery_certified=float("nan"), surgery_excess=float("nan"), surgery_residual=float("nan"), surgery_status=f"skipped: {exc}")
        rows.append(row)
    d = np.array([r["delta"] for r in rows])
    g = np.array([r["lagrange_gap"] for r in rows])
    coef, *_ = np.linalg.lstsq(np.stack([d, d * d], axis=1), g, rcond=None)
    summary = {
        "gap_linear_coef": float(coef[0]),
        "gap_quadratic_coef": float(coef[1]),
        "min_lagrange_gap": float(g.min()),
        "min_multiplier_gap": float(min(r["multiplier_gap_rho_eps"] for r in rows)),
    }
    return {"rows": rows, "summary": summary}


def run_counterexample(cfg: ExperimentConfig) -> ExperimentReport:
    report = discontinuity_series(cfg.n_list, cfg.m)
    rows = [
        {"n": "inf" if r.n is None else r.n, "dmk": r.dmk, "action_lower": r.action_lower, "action_computed": r.action_computed}
        for r in report.rows
    ]
    summary = {
        "distances_decreasing": report.distances_decreasing(),
        "actions_above_1_64": report.actions_bounded_below(),
        "meets_lower_bound": report.meets_lower_bound(),
    }
    return ExperimentReport("counterexample", rows, summary, all(summary.values()))


def diameter_sample(cfg: ExperimentConfig, rng, count: int):
    grid = cfg.grid
    out = [("identity", gamma_identity(grid)), ("half_shift", gamma_shift(grid, grid.n // 2))]
    for _ in range(count - len(out)):
        heat = float(np.exp(rng.uniform(np.log(0.25), np.log(10.0))))
        out.append((f"heat={heat:.4f}", random_bistochastic(grid, int(rng.integers(0, 2**31)), heat)))
    return out


def run_diameter(cfg: ExperimentConfig) -> ExperimentReport:
    """Largest optimal action over a random sample of endpoint couplings,
    compared with the first half of the sample."""
    rng = np.random.default_rng(cfg.seed)
    count = max(cfg.samples, 50)
    rows = []
    for k, (kind, gamma) in enumerate(diameter_sample(cfg, rng, 2 * count)):
        rows.append({"index": k, "kind": kind, "action": _action(cfg, gamma, cfg.steps)})
    acts = np.array([r["action"] for r in rows])
    first = float(acts[:count].max())
    full = float(acts.max())
    change = (full - first) / first if first > 0 else 0.0
    summary = {
        "max_action": full,
        "max_action_half": first,
        "mean_action": float(acts.mean()),
        "min_action": float(acts.min()),
        "relative_change": change,
        "stable": bool(change < 0.1),
    }
    return ExperimentReport("diameter", rows, summary, summary["stable"])


RUNNERS = {
    "action-holder": run_action_holder,
    "pressure-holder": run_pressure_holder,
    "counterexample": run_counterexample,
    "diameter": run_diameter,
}
