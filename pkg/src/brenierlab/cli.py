"""Command-line entry point (``brenierlab <subcommand>``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .brenier import extrapolated_entropic_action, solve_entropic, solve_exact, verify_admissible
from .coupling import (
    BistochasticMeasure,
    gamma_identity,
    gamma_shift,
    random_bistochastic,
    random_permutation_mixture,
)
from .dacmoser import flow_map, verify_pushforward
from .experiments import RUNNERS, ExperimentConfig, config_hash
from .fields import DensityPath
from .surgery import SurgeryError, surgery_pipeline
from .torus import TorusGrid

logger = logging.getLogger("brenierlab")


def load_config(path) -> dict:
    """Read a JSON or TOML config file (chosen by extension)."""
    if path is None:
        return {}
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with path.open("rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text())


def write_manifest(out_dir: Path, name: str, config: dict, files: list[str], summary: dict) -> Path:
    manifest = {
        "command": name,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "files": files,
        "summary": summary,
    }
    path = out_dir / f"{name}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=float))
    return path


def make_coupling(spec: str, grid: TorusGrid, seed: int) -> BistochasticMeasure:
    """``identity``, ``shift:K``, ``random[:SEED]`` or ``mixture[:SEED]``."""
    kind, _, arg = str(spec).partition(":")
    if kind == "identity":
        return gamma_identity(grid)
    if kind == "shift":
        return gamma_shift(grid, int(arg or 1))
    if kind == "random":
        return random_bistochastic(grid, int(arg) if arg else seed)
    if kind == "mixture":
        return random_permutation_mixture(grid, int(arg) if arg else seed)
    raise ValueError(f"unknown coupling spec {spec!r}")


def load_instance(path) -> tuple[BistochasticMeasure, DensityPath]:
    """Instance JSON: ``{grid, times, gamma, rho}`` with ``rho`` one flat frame per time."""
    d = json.loads(Path(path).read_text())
    grid = TorusGrid.from_dict(d["grid"])
    gamma = BistochasticMeasure(grid, d["gamma"])
    times = np.asarray(d["times"], dtype=float)
    if "rho" in d and d["rho"] is not None:
        frames = np.asarray(d["rho"], dtype=float).reshape((len(times),) + grid.shape)
        rho = DensityPath(grid, times, frames)
    else:
        rho = DensityPath(grid, times, np.ones((len(times),) + grid.shape))
    return gamma, rho


def dump_instance(gamma: BistochasticMeasure, rho: DensityPath) -> str:
    return json.dumps(
        {
            "grid": gamma.grid.to_dict(),
            "times": rho.time_grid.tolist(),
            "gamma": gamma.mass.tolist(),
            "rho": rho.frames.reshape(len(rho.time_grid), -1).tolist(),
        }
    )


def _merged(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    cfg.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in ("config", "command", "func", "verbose", "out_dir") or value is None:
            continue
        cfg[key] = value
    return cfg


def _pressure_csv(pressure) -> str:
    lines = ["t,cell,value"]
    for t, frame in zip(pressure.time_grid, pressure.frames):
        for cell, v in enumerate(frame.ravel()):
            lines.append(f"{t!r},{cell},{float(v)!r}")
    return "\n".join(lines) + "\n"


def cmd_experiment(args) -> int:
    cfg_dict = load_config(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg_dict["out_dir"] = str(args.out_dir)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    report = RUNNERS[args.command](cfg)
    path = report.write(args.out_dir, cfg)
    print(json.dumps({"experiment": report.name, "passed": report.passed, "manifest": str(path)}))
    return 0 if report.passed or not args.strict else 1


SOLVE_DEFAULTS = {"dim": 1, "n": 4, "steps": 2, "gamma": "shift:2", "solver": "exact", "reg": 0.05, "seed": 0}


def cmd_solve(args) -> int:
    cfg = _merged(args, SOLVE_DEFAULTS)
    if cfg.get("instance"):
        gamma, rho = load_instance(cfg["instance"])
    else:
        grid = TorusGrid(int(cfg["dim"]), int(cfg["n"]))
        gamma = make_coupling(cfg["gamma"], grid, int(cfg["seed"]))
        rho = DensityPath.uniform(grid, int(cfg["steps"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["solver"] == "exact":
        sol = solve_exact(gamma, rho)
        stats = {"dual_objective": sol.dual_objective, "duality_gap": sol.duality_gap}
        action, flow, pressure = sol.action, sol.flow, sol.pressure
    elif cfg["solver"] == "entropic":
        sol = solve_entropic(gamma, rho, reg=float(cfg["reg"]))
        stats = dict(sol.stats)
        if cfg.get("reg_schedule"):
            stats["extrapolated_action"], _ = extrapolated_entropic_action(gamma, rho, regs=cfg["reg_schedule"])
        action, flow, pressure = sol.action, sol.flow, sol.pressure
    else:
        raise ValueError(f"unknown solver {cfg['solver']!r}")
    residuals = verify_admissible(flow, gamma, rho)
    result = {
        "action": action,
        "pressure": pressure.to_dict(),
        "residuals": residuals.to_dict(),
        "stats": stats,
    }
    (out / "solve_result.json").write_text(json.dumps(result, indent=2, default=float))
    (out / "solve_pressure.csv").write_text(_pressure_csv(pressure))
    (out / "solve_instance.json").write_text(dump_instance(gamma, rho))
    write_manifest(
        out,
        "solve",
        cfg,
        ["solve_result.json", "solve_pressure.csv", "solve_instance.json"],
        {"action": action, "max_residual": residuals.max_residual},
    )
    print(json.dumps({"action": action, "max_residual": residuals.max_residual}))
    return 0


SURGERY_DEFAULTS = {"dim": 1, "n": 4, "steps": 2, "mu": "identity", "nu": "shift:1", "blend": 1.0, "eps": 0.25, "seed": 0}


def cmd_surgery(args) -> int:
    cfg = _merged(args, SURGERY_DEFAULTS)
    grid = TorusGrid(int(cfg["dim"]), int(cfg["n"]))
    mu = make_coupling(cfg["mu"], grid, int(cfg["seed"]))
    nu = mu.blend(make_coupling(cfg["nu"], grid, int(cfg["seed"]) + 1), float(cfg["blend"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = surgery_pipeline(mu, nu, None, float(cfg["eps"]), steps=int(cfg["steps"]))
    except SurgeryError as exc:
        print(json.dumps({"error": str(exc), "stage": exc.stage}))
        return 2
    (out / "surgery_report.json").write_text(res.to_json())
    lines = ["path,mass," + ",".join(f"t{k}" for k in range(len(res.flow.time_grid)))]
    for k, (cells, m) in enumerate(zip(res.flow.cell_paths(), res.flow.mass)):
        lines.append(f"{k},{float(m)!r}," + ",".join(str(int(c)) for c in cells))
    (out / "surgery_flow.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, "surgery", cfg, ["surgery_report.json", "surgery_flow.csv"], res.to_report()["budget"])
    print(json.dumps({"certified_action": res.certified_action, "budget": res.budget.to_dict()}))
    return 0


DACMOSER_DEFAULTS = {"dim": 1, "n": 32, "amplitude": 0.2, "ode_steps": 32}


def cmd_dacmoser(args) -> int:
    cfg = _merged(args, DACMOSER_DEFAULTS)
    grid = TorusGrid(int(cfg["dim"]), int(cfg["n"]))
    x = grid.cell_centers[:, 0].reshape(grid.shape)
    f = DensityPath(grid, [0.0, 1.0], np.ones((2,) + grid.shape))
    g_frame = 1 + float(cfg["amplitude"]) * np.cos(2 * np.pi * x)
    g = DensityPath(grid, [0.0, 1.0], np.stack([g_frame, g_frame]))
    psi = flow_map(f, g, int(cfg["ode_steps"]))
    report = verify_pushforward(psi, f, g)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dacmoser_map.json").write_text(psi.to_json())
    lines = ["frame,w1,tv,deposited_mass"]
    for k, (w, tv, m) in enumerate(zip(report.w1, report.tv, report.deposited_mass)):
        lines.append(f"{k},{w!r},{tv!r},{m!r}")
    (out / "dacmoser_report.csv").write_text("\n".join(lines) + "\n")
    summary = {"norm_excess": psi.norm_excess, "max_w1": report.max_w1, "spacing": grid.spacing}
    write_manifest(out, "dacmoser", cfg, ["dacmoser_map.json", "dacmoser_report.csv"], summary)
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brenierlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", type=Path, default=Path("results"))

    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} study")
        common(p)
        p.add_argument("--strict", action="store_true", help="exit with status 1 when the study's check fails")
        p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("solve", help="solve one instance")
    common(p)
    p.add_argument("--instance", help="instance JSON {grid, times, gamma, rho}")
    p.add_argument("--dim", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--gamma", help="identity | shift:K | random[:SEED] | mixture[:SEED]")
    p.add_argument("--solver", choices=["exact", "entropic"])
    p.add_argument("--reg", type=float)
    p.add_argument("--reg-schedule", type=float, nargs="+")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("surgery", help="run the surgery pipeline on one pair")
    common(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mu")
    p.add_argument("--nu", help="coupling blended into mu with weight --blend")
    p.add_argument("--blend", type=float)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("dacmoser", help="straightening map of the cosine instance")
    common(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--ode-steps", type=int)
    p.set_defaults(func=cmd_dacmoser)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
