"""Generalized incompressible flows on the discrete torus."""

from .brenier import (
    BrenierSolver,
    BudgetExceeded,
    InfeasibleProblem,
    extract_pressure_pairing,
    extrapolate_to_zero,
    extrapolated_entropic_action,
    lagrange_gap,
    solve_entropic,
    solve_exact,
    verify_admissible,
    verify_least_action,
)
from .coupling import (
    BistochasticMeasure,
    gamma_identity,
    gamma_shift,
    mk_distance,
    random_bistochastic,
    random_permutation_mixture,
)
from .dacmoser import DacorognaMoser, StraighteningMap, flow_map, verify_pushforward
from .extended import LabeledCoupling, discontinuity_series, solve_extended
from .fields import DensityPath, FieldPath, e_norm, regularize_density
from .flows import ChainFlow, GeneralizedFlow, PathLattice, PressureField
from .surgery import SurgeryError, surgery_pipeline
from .torus import Mollifier, TorusGrid

__version__ = "0.1.0"

__all__ = [
    "BistochasticMeasure",
    "BrenierSolver",
    "BudgetExceeded",
    "ChainFlow",
    "DacorognaMoser",
    "DensityPath",
    "FieldPath",
    "GeneralizedFlow",
    "InfeasibleProblem",
    "LabeledCoupling",
    "Mollifier",
    "PathLattice",
    "PressureField",
    "StraighteningMap",
    "SurgeryError",
    "TorusGrid",
    "discontinuity_series",
    "e_norm",
    "extract_pressure_pairing",
    "extrapolate_to_zero",
    "extrapolated_entropic_action",
    "flow_map",
    "gamma_identity",
    "gamma_shift",
    "lagrange_gap",
    "mk_distance",
    "random_bistochastic",
    "random_permutation_mixture",
    "regularize_density",
    "solve_entropic",
    "solve_exact",
    "solve_extended",
    "surgery_pipeline",
    "verify_admissible",
    "verify_least_action",
    "verify_pushforward",
]
