import numpy as np
import pytest

from dgmd.core import Box, ConfigurationError, ParticleSystem
from dgmd.dgrad import (
    PairPotential,
    angle_dg,
    angle_force,
    dihedral_dg,
    dihedral_force,
    gonzalez_dg,
    itoh_abe_dg,
    pairwise_dg,
    pairwise_force,
)
from dgmd.engine import SerialEngine
from dgmd.forcefield import ForceField, SpeciesTable
from dgmd.potentials import angle_grad_distance_form, dihedral_grad_distance_form

from conftest import (
    make_experiment_engine,
    random_angle_configs,
    random_dihedral_configs,
    random_pair_configs,
)

BUTANE_COEFFS = np.array([1.116, -1.462, -1.578, 0.368, 3.156, 3.788])
COS0 = np.cos(np.deg2rad(104.52))


def defining_gap(grad, x, u, v_x, v_u):
    return abs(float(np.sum(grad * (u - x))) - (v_u - v_x))


def test_gonzalez_quadratic_is_midpoint():
    a = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 4.0]])
    value = lambda x: 0.5 * x @ a @ x
    grad = lambda x: a @ x
    rng = np.random.default_rng(1)
    u = rng.standard_normal(3)
    up = rng.standard_normal(3)
    got = gonzalez_dg(value, grad, u, up)
    assert np.allclose(got, a @ (u + up) / 2, rtol=0, atol=1e-14)


def test_gonzalez_coincident_arguments():
    value = lambda x: float(np.sum(x ** 4))
    grad = lambda x: 4.0 * x ** 3
    u = np.array([1.0, -0.5, 2.0])
    assert np.array_equal(gonzalez_dg(value, grad, u, u), grad(u))


def test_gonzalez_scalar_hand_value():
    value = lambda x: float(x[0] ** 4)
    grad = lambda x: np.array([4.0 * x[0] ** 3])
    got = gonzalez_dg(value, grad, np.array([1.0]), np.array([2.0]))
    assert abs(got[0] - 15.0) < 1e-13


def test_gonzalez_defining_property():
    value = lambda x: float(np.sum(np.sin(x)) + x @ x)
    grad = lambda x: np.cos(x) + 2.0 * x
    rng = np.random.default_rng(2)
    for _ in range(50):
        u = rng.standard_normal(5)
        up = u + 0.5 * rng.standard_normal(5)
        g = gonzalez_dg(value, grad, u, up)
        assert abs(g @ (up - u) - (value(up) - value(u))) < 1e-12


def test_itoh_abe_hand_values():
    value = lambda x: float(x[0] * x[1])
    u = np.zeros(2)
    up = np.ones(2)
    assert np.allclose(itoh_abe_dg(value, u, up, "left"), [0.0, 1.0])
    assert np.allclose(itoh_abe_dg(value, u, up, "right"), [1.0, 0.0])
    assert np.allclose(itoh_abe_dg(value, u, up, "symmetric"), [0.5, 0.5])


def test_itoh_abe_coincident_arguments_use_partials():
    value = lambda x: float(x[0] ** 2 + 3.0 * x[1])
    partial = lambda x, i: 2.0 * x[0] if i == 0 else 3.0
    u = np.array([1.5, -2.0])
    got = itoh_abe_dg(value, u, u.copy(), "left", partial=partial)
    assert np.array_equal(got, [3.0, 3.0])
    # without the callback the degenerate coordinates fall back to central
    # differences of the value function
    got = itoh_abe_dg(value, u, u.copy(), "left")
    assert np.allclose(got, [3.0, 3.0], atol=1e-9)


def test_itoh_abe_defining_property():
    value = lambda x: float(np.cos(x[0]) + x[1] ** 3 + x[0] * x[2])
    rng = np.random.default_rng(3)
    for variant in ("left", "right", "symmetric"):
        for _ in range(30):
            u = rng.standard_normal(3)
            up = u + rng.standard_normal(3)
            g = itoh_abe_dg(value, u, up, variant)
            assert abs(g @ (up - u) - (value(up) - value(u))) < 1e-12


def test_itoh_abe_symmetric_is_average():
    value = lambda x: float(x[0] ** 2 * x[1] + np.exp(0.3 * x[2]))
    rng = np.random.default_rng(4)
    u = rng.standard_normal(3)
    up = u + rng.standard_normal(3)
    left = itoh_abe_dg(value, u, up, "left")
    right = itoh_abe_dg(value, u, up, "right")
    sym = itoh_abe_dg(value, u, up, "symmetric")
    assert np.array_equal(sym, 0.5 * (left + right))


def test_pairwise_dg_hand_value():
    pot = PairPotential.harmonic_bond(1.0, 0.0)  # V = r^2
    zero = np.zeros(3)
    g_i, g_j, v_x, v_u = pairwise_dg(zero, np.array([1.0, 0.0, 0.0]),
                                     zero, np.array([2.0, 0.0, 0.0]), pot)
    assert np.allclose(g_j, [3.0, 0.0, 0.0], rtol=0, atol=1e-14)
    assert np.array_equal(g_i, -g_j)
    assert v_x == 1.0 and v_u == 4.0


def test_pairwise_dg_coincident_is_exact_gradient():
    rng = np.random.default_rng(5)
    x_i, x_j, _, _ = random_pair_configs(rng, 40)
    for pot in (PairPotential.lennard_jones(1.0, 5.0),
                PairPotential.lennard_jones(1.0, 1.0, r_cut=2.5),
                PairPotential.harmonic_bond(450.0, 0.957)):
        for a, b in zip(x_i, x_j):
            g_i, g_j, v_x, v_u = pairwise_dg(a, b, a.copy(), b.copy(), pot)
            f_i, f_j, v = pairwise_force(a, b, pot)
            scale = 1 + np.abs(f_j).max()
            assert np.abs(g_j - f_j).max() < 1e-10 * scale
            assert np.abs(g_i - f_i).max() < 1e-10 * scale
            assert v_x == v_u


def test_pairwise_dg_argument_swap_identical():
    rng = np.random.default_rng(6)
    x_i, x_j, u_i, u_j = random_pair_configs(rng, 40)
    pot = PairPotential.lennard_jones(1.0, 5.0)
    for a, b, ua, ub in zip(x_i, x_j, u_i, u_j):
        g1 = pairwise_dg(a, b, ua, ub, pot)
        g2 = pairwise_dg(ua, ub, a, b, pot)
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])
        assert g1[2] == g2[3] and g1[3] == g2[2]


def test_pairwise_dg_defining_property():
    rng = np.random.default_rng(7)
    x_i, x_j, u_i, u_j = random_pair_configs(rng, 200)
    for pot in (PairPotential.lennard_jones(1.0, 5.0),
                PairPotential.lennard_jones(1.0, 1.0, r_cut=2.5),
                PairPotential.harmonic_bond(450.0, 0.957)):
        for a, b, ua, ub in zip(x_i, x_j, u_i, u_j):
            g_i, g_j, v_x, v_u = pairwise_dg(a, b, ua, ub, pot)
            grad = np.stack([g_i, g_j])
            x = np.stack([a, b])
            u = np.stack([ua, ub])
            tol = 1e-11 * (1 + abs(v_x) + abs(v_u))
            assert defining_gap(grad, x, u, v_x, v_u) < tol


def test_pairwise_dg_minimum_image():
    box = Box(True, [10.0, 10.0, 10.0])
    pot = PairPotential.lennard_jones(1.0, 5.0)
    a = np.array([0.2, 5.0, 5.0])
    b = np.array([9.7, 5.0, 5.0])  # true separation 0.5 across the seam
    g_i, g_j, v_x, v_u = pairwise_dg(a, b, a, b, pot, box=box)
    f_i, f_j, v = pairwise_force(a, b, pot, box=box)
    r = 0.5
    sr6 = (1.0 / r) ** 6
    assert abs(v - 4.0 * 5.0 * (sr6 * sr6 - sr6)) < 1e-9
    assert np.array_equal(g_j, f_j)


def test_angle_dg_coincident_matches_analytic_gradient():
    rng = np.random.default_rng(8)
    x, _ = random_angle_configs(rng, 60)
    for variant in ("left", "right", "symmetric"):
        for tri in x:
            g, vq, vu = angle_dg(tri, tri.copy(), 55.0, COS0, variant=variant)
            want = angle_grad_distance_form(tri[0], tri[1], tri[2], 55.0, COS0)
            assert np.abs(g - want).max() < 1e-10 * (1 + np.abs(want).max())
            assert vq == vu


def test_angle_dg_defining_property():
    rng = np.random.default_rng(9)
    x, u = random_angle_configs(rng, 200)
    for variant in ("left", "right", "symmetric"):
        for tri, tri_u in zip(x, u):
            g, vq, vu = angle_dg(tri, tri_u, 55.0, COS0, variant=variant)
            tol = 1e-11 * (1 + abs(vq) + abs(vu))
            assert defining_gap(g, tri, tri_u, vq, vu) < tol


def test_angle_dg_symmetric_swap_identical():
    rng = np.random.default_rng(10)
    x, u = random_angle_configs(rng, 50)
    for tri, tri_u in zip(x, u):
        g1, vq1, vu1 = angle_dg(tri, tri_u, 55.0, COS0, variant="symmetric")
        g2, vq2, vu2 = angle_dg(tri_u, tri, 55.0, COS0, variant="symmetric")
        assert np.array_equal(g1, g2)
        assert vq1 == vu2 and vu1 == vq2


def test_angle_dg_conservation_identities():
    rng = np.random.default_rng(11)
    x, u = random_angle_configs(rng, 100)
    for variant in ("left", "right", "symmetric"):
        for tri, tri_u in zip(x, u):
            g, _, _ = angle_dg(tri, tri_u, 55.0, COS0, variant=variant)
            scale = 1 + np.abs(g).max()
            assert np.abs(g.sum(axis=0)).max() < 1e-13 * scale
            torque = np.cross(tri_u + tri, g).sum(axis=0)
            assert np.abs(torque).max() < 1e-12 * scale


def test_dihedral_dg_coincident_matches_analytic_gradient():
    rng = np.random.default_rng(12)
    x, _ = random_dihedral_configs(rng, 60)
    for variant in ("left", "right", "symmetric"):
        for quad in x:
            g, vq, vu = dihedral_dg(quad, quad.copy(), 8.0, BUTANE_COEFFS,
                                    variant=variant)
            want = dihedral_grad_distance_form(*quad, 8.0, BUTANE_COEFFS)
            assert np.abs(g - want).max() < 1e-10 * (1 + np.abs(want).max())
            assert vq == vu


def test_dihedral_dg_defining_property():
    rng = np.random.default_rng(13)
    x, u = random_dihedral_configs(rng, 200)
    for variant in ("left", "right", "symmetric"):
        for quad, quad_u in zip(x, u):
            g, vq, vu = dihedral_dg(quad, quad_u, 8.0, BUTANE_COEFFS,
                                    variant=variant)
            tol = 1e-11 * (1 + abs(vq) + abs(vu))
            assert defining_gap(g, quad, quad_u, vq, vu) < tol


def test_dihedral_dg_symmetric_swap_identical():
    rng = np.random.default_rng(14)
    x, u = random_dihedral_configs(rng, 50)
    for quad, quad_u in zip(x, u):
        g1, vq1, vu1 = dihedral_dg(quad, quad_u, 8.0, BUTANE_COEFFS,
                                   variant="symmetric")
        g2, vq2, vu2 = dihedral_dg(quad_u, quad, 8.0, BUTANE_COEFFS,
                                   variant="symmetric")
        assert np.array_equal(g1, g2)
        assert vq1 == vu2 and vu1 == vq2


def test_dihedral_dg_conservation_identities():
    rng = np.random.default_rng(15)
    x, u = random_dihedral_configs(rng, 100)
    for variant in ("left", "right", "symmetric"):
        for quad, quad_u in zip(x, u):
            g, _, _ = dihedral_dg(quad, quad_u, 8.0, BUTANE_COEFFS,
                                  variant=variant)
            scale = 1 + np.abs(g).max()
            assert np.abs(g.sum(axis=0)).max() < 1e-13 * scale
            torque = np.cross(quad_u + quad, g).sum(axis=0)
            assert np.abs(torque).max() < 1e-12 * scale


def test_dihedral_dg_constant_polynomial_is_zero():
    rng = np.random.default_rng(16)
    x, u = random_dihedral_configs(rng, 20)
    for quad, quad_u in zip(x, u):
        g, vq, vu = dihedral_dg(quad, quad_u, 8.0, np.array([0.42]),
                                variant="symmetric")
        assert np.array_equal(g, np.zeros((4, 3)))
        assert vq == vu == 8.0 * 0.42


def _lone_pair_engine():
    n = 2
    q = np.array([[0.0, 0.0, 0.0], [1.3, 0.2, -0.1]])
    system = ParticleSystem(q, np.zeros((n, 3)), np.ones(n),
                            np.zeros(n, np.int64), np.full(n, -1, np.int64),
                            np.arange(n))
    species = SpeciesTable(["A"], [1.0], [1.0], [5.0])
    return SerialEngine(system, ForceField(species, lj=True))


def test_engine_assembly_empty_system_is_zero():
    n = 1
    system = ParticleSystem(np.zeros((1, 3)), np.zeros((1, 3)), np.ones(1),
                            np.zeros(1, np.int64), np.full(1, -1, np.int64),
                            np.arange(1))
    species = SpeciesTable(["A"], [1.0], [1.0], [5.0])
    eng = SerialEngine(system, ForceField(species, lj=True))
    ev = eng.dg_assemble(system.q, system.q + 0.1)
    assert np.array_equal(ev.gradient, np.zeros((1, 3)))
    assert ev.v_q == 0.0 and ev.v_u == 0.0
    assert eng.potential(system.q) == 0.0


def test_engine_assembly_single_pair_matches_pairwise_dg():
    eng = _lone_pair_engine()
    q = eng.system.q
    u = q + np.array([[0.05, -0.02, 0.01], [-0.03, 0.04, 0.02]])
    ev = eng.dg_assemble(q, u)
    pot = PairPotential.lennard_jones(1.0, 5.0)
    g_i, g_j, v_x, v_u = pairwise_dg(q[0], q[1], u[0], u[1], pot)
    assert np.array_equal(ev.gradient, np.stack([g_i, g_j]))
    assert ev.v_q == v_x and ev.v_u == v_u


def test_engine_dg_at_coincident_matches_force_assembly():
    for name in ("two_lj", "water", "butane"):
        _, eng = make_experiment_engine(name)
        q = eng.system.q
        ev = eng.dg_assemble(q, q.copy())
        fv = eng.force_assemble(q)
        scale = 1 + np.abs(fv.gradient).max()
        assert np.abs(ev.gradient - fv.gradient).max() < 1e-10 * scale
        assert abs(ev.v_q - fv.potential) < 1e-12 * (1 + abs(fv.potential))


def test_engine_dg_defining_property_molecular():
    rng = np.random.default_rng(17)
    for name in ("water", "butane"):
        _, eng = make_experiment_engine(name)
        q = eng.system.q
        for _ in range(20):
            u = q + 0.02 * rng.standard_normal(q.shape)
            ev = eng.dg_assemble(q, u)
            tol = 1e-11 * (1 + abs(ev.v_q) + abs(ev.v_u))
            gap = abs(float(np.sum(ev.gradient * (u - q))) - (ev.v_u - ev.v_q))
            assert gap < tol


def test_linearized_zero_potential_is_zero_operator():
    n = 3
    system = ParticleSystem(np.arange(9.0).reshape(3, 3), np.zeros((n, 3)),
                            np.ones(n), np.zeros(n, np.int64),
                            np.full(n, -1, np.int64), np.arange(n))
    species = SpeciesTable(["A"], [1.0], [1.0], [5.0])
    eng = SerialEngine(system, ForceField(species, lj=False))
    q = system.q
    for mode in ("full", "simplified"):
        lin = eng.linearize_dg(q, q + 0.1, mode)
        v = np.ones((n, 3))
        assert np.array_equal(eng.apply_linearized(lin, v), np.zeros((n, 3)))


def test_full_linearization_matches_directional_differences():
    eng = _lone_pair_engine()
    rng = np.random.default_rng(18)
    q = eng.system.q
    u = q + 0.01 * rng.standard_normal(q.shape)
    lin = eng.linearize_dg(q, u, "full")
    h = 1e-6
    for _ in range(10):
        v = rng.standard_normal(q.shape)
        jv = eng.apply_linearized(lin, v)
        gp = eng.dg_assemble(q, u + h * v).gradient
        gm = eng.dg_assemble(q, u - h * v).gradient
        fd = (gp - gm) / (2 * h)
        assert np.abs(jv - fd).max() < 1e-5 * (1 + np.abs(fd).max())


def test_full_mode_rejects_bonded_molecular_terms():
    for name in ("water", "butane"):
        _, eng = make_experiment_engine(name)
        q = eng.system.q
        with pytest.raises(ConfigurationError):
            eng.linearize_dg(q, q + 1e-3, "full")


def _bilinear_gap(eng, lin, tau, rng, trials=20):
    mass = eng.system.mass[:, None]
    worst = 0.0
    for _ in range(trials):
        v = rng.standard_normal((eng.n, 3))
        w = rng.standard_normal((eng.n, 3))
        jv = v + 0.5 * tau * tau / mass * eng.apply_linearized(lin, v)
        jw = w + 0.5 * tau * tau / mass * eng.apply_linearized(lin, w)
        a = float(np.sum(w * jv))
        b = float(np.sum(v * jw))
        worst = max(worst, abs(a - b) / (1 + abs(a)))
    return worst


def test_newton_matrices_symmetric_as_bilinear_forms():
    # the Newton base point starts the iteration at u = q_n, where the full
    # linearization reduces to a symmetric operator; the simplified midpoint
    # Hessian is symmetric at any argument
    rng = np.random.default_rng(19)
    eng = _lone_pair_engine()
    q0 = eng.system.q
    for trial in range(20):
        q = q0 + 0.2 * rng.standard_normal(q0.shape)
        lin = eng.linearize_dg(q, q.copy(), "full")
        assert _bilinear_gap(eng, lin, 0.005, rng, trials=10) < 1e-12
    _, butane = make_experiment_engine("butane")
    q = butane.system.q
    u = q + 0.05 * rng.standard_normal(q.shape)
    lin = butane.linearize_dg(q, u, "simplified")
    assert _bilinear_gap(butane, lin, 0.005, rng) < 1e-12
