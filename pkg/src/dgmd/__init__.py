"""Energy-conserving molecular dynamics with discrete-gradient integration."""

from .core import (
    Box,
    ConfigurationError,
    DiagnosticsRecord,
    GeometryError,
    ParseError,
    ParticleSystem,
    SolverFailure,
    StepFailure,
    UnitScale,
    kinetic_energy,
    minimum_image,
    total_angular_momentum,
    total_linear_momentum,
    wrap_positions,
)
from .forcefield import (
    AngleParams,
    BondParams,
    ForceField,
    SpeciesTable,
    Topology,
    TorsionParams,
    derive_topology,
)
from .engine import SerialEngine
from .spatial import CellEngine, ParallelEngine, SimulatedFabric, decompose
from .solver import SolverSettings
from .integrators import (
    INTEGRATORS,
    RunResult,
    implicit_midpoint_step,
    run_simulation,
    velocity_dg_step,
    verlet_step,
)
from .convergence import ConvergenceResult, convergence_study, estimate_order
from .config import (
    ExperimentConfig,
    build_engine,
    build_system,
    fcc_collision_setup,
    load_config,
)
from .dataio import (
    parse_data_file,
    read_diagnostics_csv,
    write_data_file,
    write_diagnostics_csv,
    write_xyz_frame,
)
from .verify import run_checks

__all__ = [
    "AngleParams",
    "BondParams",
    "Box",
    "CellEngine",
    "ConfigurationError",
    "ConvergenceResult",
    "DiagnosticsRecord",
    "ExperimentConfig",
    "ForceField",
    "GeometryError",
    "INTEGRATORS",
    "ParallelEngine",
    "ParseError",
    "ParticleSystem",
    "RunResult",
    "SerialEngine",
    "SimulatedFabric",
    "SolverFailure",
    "SolverSettings",
    "SpeciesTable",
    "StepFailure",
    "Topology",
    "TorsionParams",
    "UnitScale",
    "build_engine",
    "build_system",
    "convergence_study",
    "decompose",
    "derive_topology",
    "estimate_order",
    "fcc_collision_setup",
    "implicit_midpoint_step",
    "kinetic_energy",
    "load_config",
    "minimum_image",
    "parse_data_file",
    "read_diagnostics_csv",
    "run_checks",
    "run_simulation",
    "total_angular_momentum",
    "total_linear_momentum",
    "velocity_dg_step",
    "verlet_step",
    "wrap_positions",
    "write_data_file",
    "write_diagnostics_csv",
    "write_xyz_frame",
]

__version__ = "0.1.0"
