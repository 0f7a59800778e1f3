"""Species tables, interaction parameters and bonded topology.

Molecules are chains: consecutive atoms of a molecule are bonded, consecutive
bond pairs form angles and consecutive angle triples form proper torsions.
Branched (improper) torsions cannot be derived from chain order and must be
listed explicitly.  Lennard-Jones acts only between atoms of different
molecules (or atoms belonging to no molecule), with Lorentz-Berthelot mixing
across species.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError
from .potentials import mix_lj


@dataclass
class BondParams:
    k: float
    r0: float


@dataclass
class AngleParams:
    k: float
    theta0_deg: float

    @property
    def cos_theta0(self):
        return math.cos(math.radians(self.theta0_deg))


@dataclass
class TorsionParams:
    k: float
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 1 or self.coeffs.size == 0:
            raise ConfigurationError("torsion coefficients must be a 1-d list")


@dataclass
class SpeciesTable:
    """Per-species mass and LJ parameters, indexed by species id."""

    names: list
    mass: np.ndarray
    sigma: np.ndarray
    epsilon: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.epsilon = np.asarray(self.epsilon, dtype=float)
        n = len(self.names)
        for name in ("mass", "sigma", "epsilon"):
            if getattr(self, name).shape != (n,):
                raise ConfigurationError(f"species {name} must have {n} entries")
        if n and (np.any(self.mass <= 0) or np.any(self.sigma <= 0)
                  or np.any(self.epsilon < 0)):
            raise ConfigurationError("species parameters out of range")

    @property
    def n(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown species {name!r}") from None


@dataclass
class ForceField:
    """Complete interaction description for one run."""

    species: SpeciesTable
    lj: bool = True
    r_cut: float | None = None
    bond: BondParams | None = None
    angle: AngleParams | None = None
    torsion: TorsionParams | None = None
    improper: TorsionParams | None = None

    def __post_init__(self):
        if self.r_cut is not None and self.r_cut <= 0:
            raise ConfigurationError("cutoff must be positive")
        ns = self.species.n
        # Pairwise mixing tables; switching sets in at half the cutoff.
        self.sigma_ij = np.zeros((ns, ns))
        self.epsilon_ij = np.zeros((ns, ns))
        for i in range(ns):
            for j in range(ns):
                s, e = mix_lj(self.species.sigma[i], self.species.epsilon[i],
                              self.species.sigma[j], self.species.epsilon[j])
                self.sigma_ij[i, j] = s
                self.epsilon_ij[i, j] = e

    @property
    def r_m(self):
        return None if self.r_cut is None else 0.5 * self.r_cut


@dataclass
class Topology:
    """Bonded index lists (0-based positions into the particle arrays)."""

    bonds: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    angles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    dihedrals: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.int64))
    impropers: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.int64))

    def __post_init__(self):
        self.bonds = np.asarray(self.bonds, dtype=np.int64).reshape(-1, 2)
        self.angles = np.asarray(self.angles, dtype=np.int64).reshape(-1, 3)
        self.dihedrals = np.asarray(self.dihedrals, dtype=np.int64).reshape(-1, 4)
        self.impropers = np.asarray(self.impropers, dtype=np.int64).reshape(-1, 4)

    @property
    def n_terms(self):
        return (len(self.bonds) + len(self.angles)
                + len(self.dihedrals) + len(self.impropers))

    @property
    def bonded_only_pairwise(self):
        return (len(self.angles) == 0 and len(self.dihedrals) == 0
                and len(self.impropers) == 0)


def _canonical(rows):
    """Sort index rows lexicographically so term order is reproducible."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        return rows
    order = np.lexsort(tuple(rows[:, c] for c in range(rows.shape[1] - 1, -1, -1)))
    return rows[order]


def derive_topology(molecule, impropers=None):
    """Chain-rule topology from per-particle molecule ids.

    Particles of the same molecule must occupy one contiguous id block; the
    chain order is the id order inside the block.
    """
    molecule = np.asarray(molecule, dtype=np.int64)
    bonds = []
    angles = []
    dihedrals = []
    seen = set()
    i = 0
    n = len(molecule)
    while i < n:
        mol = molecule[i]
        j = i
        while j < n and molecule[j] == mol:
            j += 1
        if mol != -1:
            if mol in seen:
                raise ConfigurationError(
                    f"molecule {mol} occupies non-contiguous particle ids")
            seen.add(mol)
            block = list(range(i, j))
            for t in range(len(block) - 1):
                bonds.append(block[t:t + 2])
            for t in range(len(block) - 2):
                angles.append(block[t:t + 3])
            for t in range(len(block) - 3):
                dihedrals.append(block[t:t + 4])
        i = j
    topo = Topology(
        bonds=_canonical(np.array(bonds, np.int64).reshape(-1, 2)),
        angles=_canonical(np.array(angles, np.int64).reshape(-1, 3)),
        dihedrals=_canonical(np.array(dihedrals, np.int64).reshape(-1, 4)),
        impropers=_canonical(np.array(impropers, np.int64).reshape(-1, 4))
        if impropers is not None else np.zeros((0, 4), np.int64),
    )
    return topo


def validate_forcefield(forcefield, topology):
    """Every derived term class needs parameters before a run can start."""
    if len(topology.bonds) and forcefield.bond is None:
        raise ConfigurationError("topology has bonds but no bond parameters")
    if len(topology.angles) and forcefield.angle is None:
        raise ConfigurationError("topology has angles but no angle parameters")
    if len(topology.dihedrals) and forcefield.torsion is None:
        raise ConfigurationError("topology has torsions but no torsion parameters")
    if len(topology.impropers) and (forcefield.improper or forcefield.torsion) is None:
        raise ConfigurationError("topology has impropers but no torsion parameters")
