"""Declarative experiment configuration.

A single TOML file names the species table, force-field parameters, box,
integrator/solver settings and either a particle data file or a built-in
initial-condition generator.  The bundled experiment files under
``experiments/`` are the canonical examples of the schema.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import tomli

from .core import Box, ConfigurationError, ParticleSystem
from .dataio import parse_data_file
from .engine import SerialEngine
from .forcefield import (AngleParams, BondParams, ForceField, SpeciesTable,
                         Topology, TorsionParams, derive_topology,
                         validate_forcefield)
from .integrators import INTEGRATORS
from .solver import SolverSettings
from .spatial import CellEngine, ParallelEngine

VARIANTS = ("left", "right", "symmetric")


@dataclass
class ExperimentConfig:
    name: str
    species: SpeciesTable
    species_pattern: list
    forcefield: ForceField
    box: Box
    data: str | None = None
    collision: dict | None = None
    convergence: dict | None = None
    impropers: np.ndarray | None = None
    integrator: str = "dg"
    dg_variant: str = "symmetric"
    tau: float = 0.005
    t_max: float = 1.0
    record_every: int = 1
    xyz_every: int = 0
    ranks: int = 1
    max_step_travel: float | None = None
    seed: int = 0
    solver: SolverSettings = field(default_factory=SolverSettings)

    @property
    def n_steps(self):
        steps = int(round(self.t_max / self.tau))
        return max(steps, 1)

    def steps_for(self, tau):
        return max(int(round(self.t_max / tau)), 1)


def _expect(table, key, kind, where):
    if key not in table:
        raise ConfigurationError(f"{where}: missing key {key!r}")
    value = table[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigurationError(
            f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _species_table(raw):
    if not raw:
        raise ConfigurationError("config needs at least one [species.<name>]")
    names, mass, sigma, epsilon = [], [], [], []
    for name, entry in raw.items():
        names.append(name)
        mass.append(_expect(entry, "mass", float, f"species.{name}"))
        sigma.append(entry.get("sigma", 1.0))
        epsilon.append(entry.get("epsilon", 0.0))
    return SpeciesTable(names, mass, sigma, epsilon)


def _forcefield(raw, species):
    bond = angle = torsion = improper = None
    if "bond" in raw:
        bond = BondParams(_expect(raw["bond"], "k", float, "forcefield.bond"),
                          _expect(raw["bond"], "r0", float, "forcefield.bond"))
    if "angle" in raw:
        angle = AngleParams(
            _expect(raw["angle"], "k", float, "forcefield.angle"),
            _expect(raw["angle"], "theta0_deg", float, "forcefield.angle"))
    if "torsion" in raw:
        torsion = TorsionParams(
            _expect(raw["torsion"], "k", float, "forcefield.torsion"),
            _expect(raw["torsion"], "coeffs", list, "forcefield.torsion"))
    if "improper" in raw:
        improper = TorsionParams(
            _expect(raw["improper"], "k", float, "forcefield.improper"),
            _expect(raw["improper"], "coeffs", list, "forcefield.improper"))
    r_cut = raw.get("r_cut")
    if r_cut is not None:
        r_cut = float(r_cut)
    return ForceField(species, lj=raw.get("lj", True), r_cut=r_cut,
                      bond=bond, angle=angle, torsion=torsion,
                      improper=improper)


def _box(raw):
    if raw is None:
        return Box()
    periodic = raw.get("periodic", True)
    lengths = raw.get("lengths")
    if periodic and lengths is None:
        raise ConfigurationError("box: periodic box needs lengths")
    return Box(periodic, lengths)


def load_config(path):
    """Parse a TOML experiment file into an ExperimentConfig."""
    with open(path, "rb") as handle:
        raw = tomli.load(handle)
    base = os.path.dirname(os.path.abspath(path))

    species = _species_table(raw.get("species", {}))
    system_raw = raw.get("system", {})
    pattern = system_raw.get("species_pattern")
    if not pattern:
        raise ConfigurationError("system.species_pattern is required")
    for name in pattern:
        species.index(name)

    forcefield = _forcefield(raw.get("forcefield", {}), species)
    box = _box(raw.get("box"))

    data = raw.get("data")
    if data is not None and not os.path.isabs(data):
        data = os.path.join(base, data)
    collision = raw.get("collision")
    if (data is None) == (collision is None):
        raise ConfigurationError(
            "config needs exactly one of 'data' or [collision]")

    impropers = None
    topo_raw = raw.get("topology", {})
    if "impropers" in topo_raw:
        impropers = np.asarray(topo_raw["impropers"], np.int64).reshape(-1, 4)
        if impropers.min(initial=1) < 1:
            raise ConfigurationError("topology.impropers ids are 1-based")
        impropers = impropers - 1

    run = raw.get("run", {})
    integrator = run.get("integrator", "dg")
    if integrator not in INTEGRATORS:
        raise ConfigurationError(f"run.integrator must be one of {INTEGRATORS}")
    variant = run.get("dg_variant", "symmetric")
    if variant not in VARIANTS:
        raise ConfigurationError(f"run.dg_variant must be one of {VARIANTS}")
    tau = float(run.get("tau", 0.005))
    if tau <= 0:
        raise ConfigurationError("run.tau must be positive")

    solver_raw = raw.get("solver", {})
    solver = SolverSettings(
        newton_tol=float(solver_raw.get("newton_tol", 1e-12)),
        max_newton=int(solver_raw.get("max_newton", 60)),
        cg_tol=float(solver_raw.get("cg_tol", 1e-8)),
        max_cg=int(solver_raw.get("max_cg", 250)),
        jacobian=solver_raw.get("jacobian", "simplified"))
    if solver.jacobian not in ("simplified", "full"):
        raise ConfigurationError("solver.jacobian must be simplified or full")

    travel = run.get("max_step_travel")
    return ExperimentConfig(
        name=raw.get("name", os.path.splitext(os.path.basename(path))[0]),
        species=species, species_pattern=list(pattern),
        forcefield=forcefield, box=box, data=data, collision=collision,
        convergence=raw.get("convergence"),
        impropers=impropers, integrator=integrator, dg_variant=variant,
        tau=tau, t_max=float(run.get("t_max", 1.0)),
        record_every=int(run.get("record_every", 1)),
        xyz_every=int(run.get("xyz_every", 0)),
        ranks=int(run.get("ranks", 1)),
        max_step_travel=None if travel is None else float(travel),
        seed=int(run.get("seed", 0)), solver=solver)


def assign_species(pattern, molecule, table):
    """Map the per-molecule species pattern onto the particle list.

    A single-entry pattern covers every particle; otherwise each contiguous
    molecule block must have exactly len(pattern) atoms, in pattern order.
    """
    molecule = np.asarray(molecule, np.int64)
    n = len(molecule)
    codes = np.array([table.index(name) for name in pattern], np.int64)
    if len(codes) == 1:
        return np.full(n, codes[0], np.int64)
    species = np.empty(n, np.int64)
    i = 0
    while i < n:
        j = i
        while j < n and molecule[j] == molecule[i]:
            j += 1
        if molecule[i] == -1:
            raise ConfigurationError(
                "species pattern with several entries needs molecule ids")
        if j - i != len(codes):
            raise ConfigurationError(
                f"molecule {molecule[i]} has {j - i} atoms, species pattern "
                f"has {len(codes)}")
        species[i:j] = codes
        i = j
    return species


def _fcc_points(cells, spacing):
    """FCC lattice block: corner plus three face centers per cubic cell."""
    cells = np.asarray(cells, np.int64)
    if cells.shape != (3,) or cells.min() < 1:
        raise ConfigurationError("cell counts must be three positive integers")
    basis = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0],
                      [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]) * spacing
    grid = np.stack(np.meshgrid(*(np.arange(c) for c in cells),
                                indexing="ij"), axis=-1).reshape(-1, 3)
    pts = (grid[:, None, :] * spacing + basis[None, :, :]).reshape(-1, 3)
    return pts


def _body_extent(cells, spacing):
    return (np.asarray(cells, float) - 0.5) * spacing


def fcc_collision_setup(config):
    """Two FCC bodies on a shared lattice pitch, the smaller one incoming.

    The pitch is 2^{1/6} sigma * sqrt(2) so the nearest-neighbor distance
    within each body sits exactly at the potential minimum 2^{1/6} sigma.
    Both bodies are centered in x and y; the small body floats `gap` above
    the large one in z and carries the configured velocity.
    """
    if len(config.species_pattern) != 1:
        raise ConfigurationError("collision setup uses a single species")
    table = config.species
    si = table.index(config.species_pattern[0])
    sigma = table.sigma[si]
    mass = table.mass[si]
    if not config.box.periodic:
        raise ConfigurationError("collision setup needs a periodic box")
    lengths = config.box.lengths

    raw = config.collision
    small_cells = raw.get("small_cells", [4, 4, 4])
    large_cells = raw.get("large_cells", [8, 8, 4])
    gap = float(raw.get("gap", 2.0 * sigma))
    velocity = np.asarray(raw.get("velocity", [0.0, 0.0, -20.4]), float)
    if gap <= 0:
        raise ConfigurationError("collision bodies overlap (gap <= 0)")

    spacing = 2.0 ** (1.0 / 6.0) * sigma * math.sqrt(2.0)
    small = _fcc_points(small_cells, spacing)
    large = _fcc_points(large_cells, spacing)
    ext_s = _body_extent(small_cells, spacing)
    ext_l = _body_extent(large_cells, spacing)

    total_z = ext_l[2] + gap + ext_s[2]
    if total_z >= lengths[2] or max(ext_s[0], ext_l[0]) >= lengths[0] \
            or max(ext_s[1], ext_l[1]) >= lengths[1]:
        raise ConfigurationError("collision bodies do not fit in the box")
    z0 = 0.5 * (lengths[2] - total_z)
    off_l = np.array([0.5 * (lengths[0] - ext_l[0]),
                      0.5 * (lengths[1] - ext_l[1]), z0])
    off_s = np.array([0.5 * (lengths[0] - ext_s[0]),
                      0.5 * (lengths[1] - ext_s[1]),
                      z0 + ext_l[2] + gap])
    small = small + off_s
    large = large + off_l

    delta = small[:, None, :] - large[None, :, :]
    min_gap = math.sqrt(float((delta ** 2).sum(axis=2).min()))
    if min_gap < 2.0 ** (1.0 / 6.0) * sigma * (1 - 1e-9):
        raise ConfigurationError("collision bodies overlap")

    q = np.concatenate([small, large])
    n = len(q)
    p = np.zeros((n, 3))
    p[:len(small)] = mass * velocity
    return ParticleSystem(q, p, np.full(n, mass),
                          np.full(n, si, np.int64),
                          np.full(n, -1, np.int64), np.arange(n))


def build_system(config):
    """Materialize (ParticleSystem, Topology) from the config source."""
    if config.collision is not None:
        system = fcc_collision_setup(config)
        topology = derive_topology(system.molecule, config.impropers)
    else:
        data = parse_data_file(config.data)
        species = assign_species(config.species_pattern, data.molecule,
                                 config.species)
        mass = config.species.mass[species]
        system = ParticleSystem(data.q, data.v * mass[:, None], mass,
                                species, data.molecule,
                                np.arange(data.n))
        topology = derive_topology(data.molecule, config.impropers)
    validate_forcefield(config.forcefield, topology)
    return system, topology


def build_engine(config, system, topology, ranks=None):
    """Pick the engine for the rank count and box/cutoff combination."""
    ranks = config.ranks if ranks is None else int(ranks)
    ff = config.forcefield
    if ranks > 1:
        return ParallelEngine(system, ff, ranks, topology=topology,
                              box=config.box,
                              max_step_travel=config.max_step_travel)
    if ranks != 1:
        raise ConfigurationError("ranks must be a positive integer")
    if config.box.periodic and ff.r_cut is not None:
        return CellEngine(system, ff, topology=topology, box=config.box,
                          max_step_travel=config.max_step_travel)
    return SerialEngine(system, ff, topology=topology, box=config.box)
