"""Shared state types, periodic geometry and global reductions.

Positions, momenta and per-particle attributes are stored as numpy arrays in
ascending global-id order; a "Vec3" throughout the package is a length-3
float64 array (or an (n, 3) array for a field of them).  All quantities are
kept in scaled, dimensionless units; conversion to SI happens only through
`UnitScale` at I/O boundaries.
"""

from dataclasses import dataclass, field

import numpy as np

# CODATA 2018 values, used only for unit bookkeeping.
ATOMIC_MASS_KG = 1.66053906660e-27
AVOGADRO = 6.02214076e23


class GeometryError(ValueError):
    """Degenerate geometry (zero separation, collinear dihedral frame, ...)."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class ConfigurationError(ValueError):
    """Inconsistent run setup (box too small, bad decomposition, ...)."""


class SolverFailure(RuntimeError):
    """Iterative solver did not reach its tolerance."""

    def __init__(self, message, best_iterate=None, iterations=0):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.iterations = iterations


class StepFailure(RuntimeError):
    """A time step could not be completed; carries the failing step index."""

    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class Box:
    """Free-space or periodic orthorhombic simulation box.

    `lengths` is required (and must be positive) for periodic boxes and
    ignored for free space.
    """

    periodic: bool = False
    lengths: np.ndarray | None = None

    def __post_init__(self):
        if self.periodic:
            if self.lengths is None:
                raise ConfigurationError("periodic box requires edge lengths")
            self.lengths = np.asarray(self.lengths, dtype=float)
            if self.lengths.shape != (3,) or not np.all(self.lengths > 0):
                raise ConfigurationError("box lengths must be three positive numbers")
        elif self.lengths is not None:
            raise ConfigurationError("free-space box takes no lengths")

    def require_cutoff_fits(self, r_cut):
        # Minimum image is unique only while every edge exceeds two cutoffs.
        if self.periodic and np.any(self.lengths <= 2.0 * r_cut):
            raise ConfigurationError(
                f"box edges {self.lengths} must exceed twice the cutoff {r_cut}"
            )


def minimum_image(delta, box):
    """Wrap separation vectors componentwise into [-L/2, L/2).

    Accepts a single vector or an (n, 3) array.  Free-space boxes return the
    input unchanged.
    """
    if not box.periodic:
        return np.asarray(delta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    L = box.lengths
    shift = -np.floor(delta / L + 0.5)
    return delta + shift * L


def wrap_positions(q, box):
    """Map positions componentwise into [0, L); identity for free space."""
    if not box.periodic:
        return q
    L = box.lengths
    return q - np.floor(q / L) * L


@dataclass
class ParticleSystem:
    """Complete mechanical state plus identity/species bookkeeping.

    Arrays are index-aligned and kept sorted by `global_id`; `molecule` is -1
    for particles that belong to no molecule.
    """

    q: np.ndarray
    p: np.ndarray
    mass: np.ndarray
    species: np.ndarray
    molecule: np.ndarray
    global_id: np.ndarray

    def __post_init__(self):
        self.q = np.ascontiguousarray(self.q, dtype=float)
        self.p = np.ascontiguousarray(self.p, dtype=float)
        self.mass = np.asarray(self.mass, dtype=float)
        self.species = np.asarray(self.species, dtype=np.int64)
        self.molecule = np.asarray(self.molecule, dtype=np.int64)
        self.global_id = np.asarray(self.global_id, dtype=np.int64)
        n = self.n
        for name in ("q", "p"):
            if getattr(self, name).shape != (n, 3):
                raise ConfigurationError(f"{name} must have shape ({n}, 3)")
        for name in ("mass", "species", "molecule", "global_id"):
            if getattr(self, name).shape != (n,):
                raise ConfigurationError(f"{name} must have shape ({n},)")
        if n and not np.all(self.mass > 0):
            raise ConfigurationError("masses must be positive")
        if len(np.unique(self.global_id)) != n:
            raise ConfigurationError("global ids must be unique")
        if n and np.any(np.diff(self.global_id) <= 0):
            raise ConfigurationError("particles must be sorted by global id")

    @property
    def n(self):
        return self.q.shape[0]

    def copy(self):
        return ParticleSystem(
            self.q.copy(), self.p.copy(), self.mass.copy(),
            self.species.copy(), self.molecule.copy(), self.global_id.copy(),
        )


def kinetic_energy(p, mass):
    """Sum of |p_i|^2 / (2 m_i) in storage (global-id) order."""
    if len(p) == 0:
        return 0.0
    return float(np.sum(np.sum(p * p, axis=1) / (2.0 * mass)))


def total_linear_momentum(p):
    if len(p) == 0:
        return np.zeros(3)
    return p.sum(axis=0)


def total_angular_momentum(q, p):
    """Sum of q_i x p_i about the coordinate origin."""
    if len(q) == 0:
        return np.zeros(3)
    return np.cross(q, p).sum(axis=0)


@dataclass
class UnitScale:
    """Reference scales fixing the dimensionless unit system.

    `sigma_m` is the reference length in metres, `epsilon_j_per_mol` the
    reference energy in J/mol and `mass_u` the reference mass in atomic mass
    units.  The derived time unit is sigma * sqrt(mass / epsilon) per
    particle.
    """

    sigma_m: float
    epsilon_j_per_mol: float
    mass_u: float

    def __post_init__(self):
        if min(self.sigma_m, self.epsilon_j_per_mol, self.mass_u) <= 0:
            raise ConfigurationError("unit scales must be positive")

    @property
    def epsilon_j(self):
        return self.epsilon_j_per_mol / AVOGADRO

    @property
    def mass_kg(self):
        return self.mass_u * ATOMIC_MASS_KG

    @property
    def time_s(self):
        """One scaled time unit in seconds."""
        return self.sigma_m * np.sqrt(self.mass_kg / self.epsilon_j)


@dataclass
class DiagnosticsRecord:
    """One row of the per-interval diagnostics stream."""

    step: int
    time: float
    kinetic: float
    potential: float
    total: float
    momentum: np.ndarray
    angular_momentum: np.ndarray
    newton_iterations: int = 0
    cg_iterations: int = 0

    def as_row(self):
        return [
            self.step, self.time, self.kinetic, self.potential, self.total,
            self.momentum[0], self.momentum[1], self.momentum[2],
            self.angular_momentum[0], self.angular_momentum[1],
            self.angular_momentum[2],
            self.newton_iterations, self.cg_iterations,
        ]


DIAGNOSTICS_HEADER = (
    "step,time,kinetic,potential,total,px,py,pz,lx,ly,lz,newton_iters,cg_iters"
)
