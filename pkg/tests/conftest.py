"""Shared fixtures and geometry helpers for the test suite."""

import pathlib

import numpy as np
import pytest

from dgmd.config import build_engine, build_system, load_config
from dgmd.core import Box, ParticleSystem
from dgmd.forcefield import ForceField, SpeciesTable
from dgmd.integrators import run_simulation
from dgmd.solver import SolverSettings
from dgmd.spatial import CellEngine, ParallelEngine, build_cells, candidate_pairs

EXPERIMENTS = pathlib.Path(__file__).resolve().parent.parent / "experiments"


def load_experiment(name):
    return load_config(EXPERIMENTS / f"{name}.toml")


def make_experiment_engine(name, ranks=None):
    """Build (config, engine) for a bundled experiment file."""
    cfg = load_experiment(name)
    system, topology = build_system(cfg)
    return cfg, build_engine(cfg, system, topology, ranks=ranks)


def random_unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_pair_configs(rng, n, lo=0.85, hi=2.4, spread=0.25):
    """Batched (x_i, x_j, u_i, u_j) with both separations inside [lo, hi].

    The bounds keep Lennard-Jones values finite without special-casing;
    rejection resamples the few draws whose trial separation escapes.
    """
    x_i = np.empty((n, 3))
    x_j = np.empty((n, 3))
    u_i = np.empty((n, 3))
    u_j = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = n - filled
        a = rng.uniform(-2.0, 2.0, size=(m, 3))
        b = a + random_unit_vectors(rng, m) * rng.uniform(lo, hi, size=(m, 1))
        ua = a + spread * rng.standard_normal((m, 3))
        ub = b + spread * rng.standard_normal((m, 3))
        sep = np.linalg.norm(ub - ua, axis=1)
        good = (sep > lo) & (sep < hi)
        k = int(good.sum())
        sl = slice(filled, filled + k)
        x_i[sl], x_j[sl] = a[good], b[good]
        u_i[sl], u_j[sl] = ua[good], ub[good]
        filled += k
    return x_i, x_j, u_i, u_j


def _angle_ok(x, min_sep=0.35, max_cos=0.93):
    r_ji = np.linalg.norm(x[:, 0] - x[:, 1], axis=1)
    r_jk = np.linalg.norm(x[:, 2] - x[:, 1], axis=1)
    r_ik = np.linalg.norm(x[:, 2] - x[:, 0], axis=1)
    cos = (r_ji ** 2 + r_jk ** 2 - r_ik ** 2) / (2.0 * r_ji * r_jk)
    sep = np.minimum(np.minimum(r_ji, r_jk), r_ik)
    return (sep > min_sep) & (np.abs(cos) < max_cos)


def random_angle_configs(rng, n, spread=0.2):
    """Batched non-degenerate (x, u) angle triplets, each of shape (n, 3, 3)."""
    x = np.empty((n, 3, 3))
    u = np.empty((n, 3, 3))
    filled = 0
    while filled < n:
        m = n - filled
        a = rng.uniform(-1.5, 1.5, size=(m, 3, 3))
        b = a + spread * rng.standard_normal((m, 3, 3))
        good = _angle_ok(a) & _angle_ok(b)
        k = int(good.sum())
        x[filled:filled + k] = a[good]
        u[filled:filled + k] = b[good]
        filled += k
    return x, u


def _dihedral_ok(x, min_sep=0.35, min_area=0.25):
    r01 = x[:, 1] - x[:, 0]
    r12 = x[:, 2] - x[:, 1]
    r23 = x[:, 3] - x[:, 2]
    n1 = np.linalg.norm(np.cross(r01, r12), axis=1)
    n2 = np.linalg.norm(np.cross(r12, r23), axis=1)
    sep = np.full(len(x), np.inf)
    for a in range(4):
        for b in range(a + 1, 4):
            sep = np.minimum(sep, np.linalg.norm(x[:, b] - x[:, a], axis=1))
    return (sep > min_sep) & (n1 > min_area) & (n2 > min_area)


def _dihedral_sweeps_defined(a, b):
    """The left/right sweeps evaluate the torsion cosine at mixed distance
    sets (some primed, some not); such a set need not belong to any real
    4-point geometry, so probe the quotients instead of guessing bounds."""
    from dgmd.core import GeometryError
    from dgmd.dgrad import dihedral_dg

    probe = np.array([0.0, 1.0])
    try:
        dihedral_dg(a, b, 1.0, probe, variant="left")
        dihedral_dg(a, b, 1.0, probe, variant="right")
    except GeometryError:
        return False
    return True


def random_dihedral_configs(rng, n, spread=0.15):
    """Batched non-degenerate (x, u) dihedral quadruples, shape (n, 4, 3)."""
    x = np.empty((n, 4, 3))
    u = np.empty((n, 4, 3))
    filled = 0
    while filled < n:
        m = n - filled
        a = rng.uniform(-1.5, 1.5, size=(m, 4, 3))
        b = a + spread * rng.standard_normal((m, 4, 3))
        good = _dihedral_ok(a) & _dihedral_ok(b)
        for quad, quad_u in zip(a[good], b[good]):
            if filled == n:
                break
            if _dihedral_sweeps_defined(quad, quad_u):
                x[filled] = quad
                u[filled] = quad_u
                filled += 1
    return x, u


def lj_gas(n=40, box_len=10.0, seed=7, sigma=1.0, epsilon=1.0, r_cut=2.5):
    """A small periodic Lennard-Jones gas plus its force field and box."""
    rng = np.random.default_rng(seed)
    q = rng.uniform(0, box_len, size=(n, 3))
    p = 0.3 * rng.standard_normal((n, 3))
    system = ParticleSystem(q, p, np.ones(n), np.zeros(n, np.int64),
                            np.full(n, -1, np.int64), np.arange(n))
    species = SpeciesTable(["Ar"], [1.0], [sigma], [epsilon])
    ff = ForceField(species, lj=True, r_cut=r_cut)
    return system, ff, Box(True, [box_len] * 3)


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    """Touch every jitted kernel once so compilation-cache loading never
    lands inside a timed assertion."""
    from dgmd import dgrad, potentials

    rng = np.random.default_rng(0)

    potentials.switch_eval(1.8, 1.25, 2.5)
    potentials.lj_eval(1.3, 1.0, 1.0, r_cut=2.5)
    potentials.lj_eval(1.3, 1.0, 1.0)
    potentials.bond_eval(1.0, 450.0, 0.957)
    potentials.angle_eval_distances(1.0, 1.0, 1.5, 55.0, -0.25)

    x_i, x_j, u_i, u_j = random_pair_configs(rng, 2)
    for pot in (dgrad.PairPotential.lennard_jones(1.0, 1.0, r_cut=2.5),
                dgrad.PairPotential.lennard_jones(1.0, 1.0),
                dgrad.PairPotential.harmonic_bond(450.0, 0.957)):
        dgrad.pairwise_dg(x_i[0], x_j[0], u_i[0], u_j[0], pot)
        dgrad.pairwise_force(x_i[0], x_j[0], pot)
    xa, ua = random_angle_configs(rng, 2)
    xd, ud = random_dihedral_configs(rng, 2)
    coeffs = np.array([1.116, -1.462, -1.578, 0.368, 3.156, 3.788])
    pairs = ((0, 1), (1, 2), (2, 3), (0, 2), (1, 3), (0, 3))
    dists = [float(np.linalg.norm(xd[0][b] - xd[0][a])) for a, b in pairs]
    potentials.dihedral_eval_distances(*dists, 8.0, coeffs)
    for variant in ("left", "right", "symmetric"):
        dgrad.angle_dg(xa[0], ua[0], 55.0, -0.25, variant=variant)
        dgrad.dihedral_dg(xd[0], ud[0], 8.0, coeffs, variant=variant)
    dgrad.angle_force(xa[0], 55.0, -0.25)
    dgrad.dihedral_force(xd[0], 8.0, coeffs)

    for name in ("two_lj", "butane"):
        cfg, eng = make_experiment_engine(name)
        q = eng.system.q
        u = q + 1e-4
        eng.begin_step(q, eng.system.p, 1e-3)
        eng.dg_assemble(q, u)
        eng.force_assemble(q)
        eng.potential(q)
        mode = "full" if name == "two_lj" else "simplified"
        lin = eng.linearize_dg(q, u, mode)
        eng.apply_linearized(lin, u - q)
        if name == "two_lj":
            lin = eng.linearize_dg(q, u, "simplified")
            eng.apply_linearized(lin, u - q)

    system, ff, box = lj_gas(n=25)
    grid = build_cells(system.q, np.zeros(3), box.lengths, ff.r_cut,
                       q_trial=system.q, wrap=True)
    candidate_pairs(grid, 2)
    settings = SolverSettings(newton_tol=1e-12)
    run_simulation(CellEngine(system.copy(), ff, box=box), 0.01, 2,
                   integrator="dg", settings=settings)
    run_simulation(ParallelEngine(system.copy(), ff, 4, box=box), 0.01, 2,
                   integrator="dg", settings=settings)
