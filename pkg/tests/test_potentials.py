import numpy as np
import pytest

from dgmd.core import GeometryError
from dgmd.potentials import (
    angle_eval_distances,
    angle_grad_distance_form,
    bond_eval,
    cos_angle_from_distances,
    cos_dihedral_from_distances,
    dihedral_eval_distances,
    dihedral_grad_distance_form,
    lj_eval,
    mix_lj,
    switch_eval,
    torsion_eval,
)

from conftest import random_angle_configs, random_dihedral_configs

BUTANE_COEFFS = np.array([1.116, -1.462, -1.578, 0.368, 3.156, 3.788])


def _dists6(x):
    pairs = ((0, 1), (1, 2), (2, 3), (0, 2), (1, 3), (0, 3))
    return [float(np.linalg.norm(x[b] - x[a])) for a, b in pairs]


def test_lj_examples():
    v, dv, _ = lj_eval(1.0, 1.0, 5.0)
    assert v == 0.0
    v, dv, _ = lj_eval(2.0 ** (1.0 / 6.0), 1.0, 5.0)
    assert abs(v + 5.0) < 1e-13
    assert abs(dv) < 1e-13
    assert lj_eval(2.5, 1.0, 5.0, r_cut=2.5) == (0.0, 0.0, 0.0)
    assert lj_eval(3.1, 1.0, 5.0, r_cut=2.5) == (0.0, 0.0, 0.0)


def test_lj_rejects_nonpositive_distance():
    with pytest.raises(GeometryError):
        lj_eval(0.0, 1.0, 1.0)
    with pytest.raises(GeometryError):
        lj_eval(-1.0, 1.0, 1.0)


def test_switch_piecewise():
    r_m, r_cut = 1.25, 2.5
    assert switch_eval(0.7, r_m, r_cut) == (1.0, 0.0, 0.0)
    assert switch_eval(r_cut, r_m, r_cut) == (0.0, 0.0, 0.0)
    assert switch_eval(9.0, r_m, r_cut) == (0.0, 0.0, 0.0)
    # midpoint x=0.5: (0.5)^3 * (1 + 1.5 + 1.5) = 0.125 * 4
    s, _, _ = switch_eval(r_m + 0.5 * (r_cut - r_m), r_m, r_cut)
    assert abs(s - 0.5) < 1e-15
    with pytest.raises(GeometryError):
        switch_eval(1.0, 2.5, 1.25)


def test_switch_derivatives_match_finite_differences():
    r_m, r_cut = 1.25, 2.5
    h = 1e-5
    for r in np.linspace(1.3, 2.45, 17):
        s0, d0, dd0 = switch_eval(r, r_m, r_cut)
        sp = switch_eval(r + h, r_m, r_cut)
        sm = switch_eval(r - h, r_m, r_cut)
        assert abs((sp[0] - sm[0]) / (2 * h) - d0) < 1e-6 * (1 + abs(d0))
        assert abs((sp[1] - sm[1]) / (2 * h) - dd0) < 1e-6 * (1 + abs(dd0))


def test_switched_lj_is_twice_continuously_differentiable():
    sigma, epsilon, r_cut = 1.0, 5.0, 2.5
    r_m = r_cut / 2
    # a genuine jump in value/slope/curvature would survive delta -> 0, while
    # the smooth change across the seam scales away linearly
    for edge in (r_m, r_cut):
        for delta in (1e-12, 1e-13):
            lo = lj_eval(edge - delta, sigma, epsilon, r_cut=r_cut)
            hi = lj_eval(edge + delta, sigma, epsilon, r_cut=r_cut)
            for a, b in zip(lo, hi):
                assert abs(a - b) < 1e-8


def test_switched_lj_derivatives_match_finite_differences():
    sigma, epsilon, r_cut = 1.0, 5.0, 2.5
    h = 1e-5
    for r in np.concatenate([np.linspace(0.95, 1.2, 7),
                             np.linspace(1.3, 2.4, 12)]):
        v0, d0, dd0 = lj_eval(r, sigma, epsilon, r_cut=r_cut)
        vp = lj_eval(r + h, sigma, epsilon, r_cut=r_cut)
        vm = lj_eval(r - h, sigma, epsilon, r_cut=r_cut)
        scale = 1 + abs(d0)
        assert abs((vp[0] - vm[0]) / (2 * h) - d0) < 1e-6 * scale
        assert abs((vp[1] - vm[1]) / (2 * h) - dd0) < 1e-6 * (1 + abs(dd0))


def test_bond_examples():
    v, dv, ddv = bond_eval(0.957, 450.0, 0.957)
    assert v == 0.0 and dv == 0.0 and ddv == 900.0
    v, _, _ = bond_eval(1.0, 450.0, 0.957)
    assert abs(v - 450.0 * 0.043 ** 2) < 1e-12
    assert abs(v - 0.832050) < 1e-6
    assert bond_eval(2.0, 1.0, 0.0) == (4.0, 4.0, 2.0)


def test_cos_angle_examples():
    assert abs(cos_angle_from_distances(1.0, 1.0, np.sqrt(2.0))) < 1e-15
    assert cos_angle_from_distances(1.0, 1.0, 2.0) == -1.0
    theta = np.deg2rad(109.47)
    i = np.array([1.0, 0.0, 0.0])
    j = np.zeros(3)
    k = np.array([np.cos(theta), np.sin(theta), 0.0])
    got = cos_angle_from_distances(np.linalg.norm(i - j), np.linalg.norm(k - j),
                                   np.linalg.norm(k - i))
    assert abs(got - np.cos(theta)) < 1e-12
    assert abs(got + 1.0 / 3.0) < 3e-5
    with pytest.raises(GeometryError):
        cos_angle_from_distances(0.0, 1.0, 1.0)


def test_cos_angle_matches_dot_product_oracle():
    rng = np.random.default_rng(11)
    x, _ = random_angle_configs(rng, 200)
    for tri in x:
        a, b = tri[0] - tri[1], tri[2] - tri[1]
        want = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        got = cos_angle_from_distances(np.linalg.norm(a), np.linalg.norm(b),
                                       np.linalg.norm(tri[2] - tri[0]))
        assert abs(got - want) < 1e-12


def test_angle_eval_examples():
    cos0 = np.cos(np.deg2rad(104.52))
    v, _ = angle_eval_distances(1.0, 1.0, np.sqrt(1.0 + 1.0 - 2.0 * cos0),
                                55.0, cos0)
    assert abs(v) < 1e-12
    v, _ = angle_eval_distances(1.0, 1.0, np.sqrt(2.0), 55.0, cos0)
    assert abs(v - 55.0 * cos0 ** 2) < 1e-12
    v, _ = angle_eval_distances(1.0, 1.0, 2.0, 1.0, 1.0)
    assert abs(v - 4.0) < 1e-14


def test_angle_partials_match_finite_differences():
    cos0 = np.cos(np.deg2rad(104.52))
    h = 1e-5
    base = [1.1, 0.95, 1.6]
    _, parts = angle_eval_distances(*base, 55.0, cos0)
    for m in range(3):
        args_p = list(base)
        args_m = list(base)
        args_p[m] += h
        args_m[m] -= h
        vp, _ = angle_eval_distances(*args_p, 55.0, cos0)
        vm, _ = angle_eval_distances(*args_m, 55.0, cos0)
        fd = (vp - vm) / (2 * h)
        assert abs(fd - parts[m]) < 1e-6 * (1 + abs(parts[m]))


def test_cos_dihedral_planar_examples():
    cis = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    trans = cis.copy()
    trans[3] = [1.0, -1.0, 0.0]
    assert abs(cos_dihedral_from_distances(*_dists6(cis)) - 1.0) < 1e-12
    assert abs(cos_dihedral_from_distances(*_dists6(trans)) + 1.0) < 1e-12


def test_cos_dihedral_collinear_raises():
    x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                  [2.0, 0.0, 0.0], [2.0, 1.0, 0.0]])
    with pytest.raises(GeometryError):
        cos_dihedral_from_distances(*_dists6(x))


def test_cos_dihedral_matches_cross_product_oracle():
    rng = np.random.default_rng(23)
    x, _ = random_dihedral_configs(rng, 200)
    for quad in x:
        m = np.cross(quad[1] - quad[0], quad[2] - quad[1])
        n = np.cross(quad[2] - quad[1], quad[3] - quad[2])
        want = float(m @ n / (np.linalg.norm(m) * np.linalg.norm(n)))
        got = cos_dihedral_from_distances(*_dists6(quad))
        assert abs(got - want) < 1e-12


def test_torsion_examples():
    v, _ = torsion_eval(0.0, 8.0, BUTANE_COEFFS)
    assert abs(v - 8.0 * 1.116) < 1e-12
    v, dv = torsion_eval(1.0, 8.0, BUTANE_COEFFS)
    assert abs(v - 8.0 * 5.388) < 1e-12
    v, dv = torsion_eval(0.37, 3.0, np.array([2.5]))
    assert v == 7.5 and dv == 0.0


def test_torsion_derivative_matches_finite_differences():
    h = 1e-6
    for c in (-0.8, -0.2, 0.4, 0.9):
        _, dv = torsion_eval(c, 8.0, BUTANE_COEFFS)
        vp, _ = torsion_eval(c + h, 8.0, BUTANE_COEFFS)
        vm, _ = torsion_eval(c - h, 8.0, BUTANE_COEFFS)
        assert abs((vp - vm) / (2 * h) - dv) < 1e-6 * (1 + abs(dv))


def test_dihedral_value_matches_torsion_of_cos():
    rng = np.random.default_rng(5)
    x, _ = random_dihedral_configs(rng, 50)
    for quad in x:
        d = _dists6(quad)
        v, _ = dihedral_eval_distances(*d, 8.0, BUTANE_COEFFS)
        want, _ = torsion_eval(cos_dihedral_from_distances(*d), 8.0,
                               BUTANE_COEFFS)
        assert abs(v - want) < 1e-12 * (1 + abs(want))


def test_angle_grad_distance_form_properties():
    rng = np.random.default_rng(17)
    cos0 = np.cos(np.deg2rad(104.52))
    x, _ = random_angle_configs(rng, 20)
    h = 1e-5
    for tri in x:
        g = angle_grad_distance_form(tri[0], tri[1], tri[2], 55.0, cos0)
        assert np.abs(g.sum(axis=0)).max() < 1e-13 * (1 + np.abs(g).max())
        shifted = tri + np.array([0.3, -1.2, 0.7])
        g2 = angle_grad_distance_form(shifted[0], shifted[1], shifted[2],
                                      55.0, cos0)
        assert np.allclose(g, g2, rtol=1e-10, atol=1e-11)
        for a in range(3):
            for c in range(3):
                tp = tri.copy()
                tm = tri.copy()
                tp[a, c] += h
                tm[a, c] -= h

                def val(t):
                    v, _ = angle_eval_distances(
                        np.linalg.norm(t[0] - t[1]), np.linalg.norm(t[2] - t[1]),
                        np.linalg.norm(t[2] - t[0]), 55.0, cos0)
                    return v

                fd = (val(tp) - val(tm)) / (2 * h)
                assert abs(fd - g[a, c]) < 1e-6 * (1 + abs(g[a, c]))


def test_dihedral_grad_distance_form_properties():
    rng = np.random.default_rng(29)
    x, _ = random_dihedral_configs(rng, 20)
    h = 1e-5
    for quad in x:
        g = dihedral_grad_distance_form(*quad, 8.0, BUTANE_COEFFS)
        assert np.abs(g.sum(axis=0)).max() < 1e-13 * (1 + np.abs(g).max())
        shifted = quad + np.array([-0.4, 0.9, 2.1])
        g2 = dihedral_grad_distance_form(*shifted, 8.0, BUTANE_COEFFS)
        assert np.allclose(g, g2, rtol=1e-10, atol=1e-11)
        for a in range(4):
            for c in range(3):
                tp = quad.copy()
                tm = quad.copy()
                tp[a, c] += h
                tm[a, c] -= h
                vp, _ = dihedral_eval_distances(*_dists6(tp), 8.0,
                                                BUTANE_COEFFS)
                vm, _ = dihedral_eval_distances(*_dists6(tm), 8.0,
                                                BUTANE_COEFFS)
                fd = (vp - vm) / (2 * h)
                assert abs(fd - g[a, c]) < 1e-6 * (1 + abs(g[a, c]))


def test_dihedral_grad_planar_trans_stationary():
    # P(c) = 1 + 2c + c^2 = (1+c)^2 has P'(-1) = 0, so the trans plane is a
    # stationary configuration and every atom gradient vanishes.
    quad = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0],
                     [1.0, 0.0, 0.0], [1.0, -1.0, 0.0]])
    g = dihedral_grad_distance_form(*quad, 3.0, np.array([1.0, 2.0, 1.0]))
    assert np.abs(g).max() < 1e-12


def test_mix_examples():
    sigma, epsilon = mix_lj(0.4, 0.046, 3.1506, 0.1521)
    assert abs(sigma - 1.7753) < 1e-12
    assert abs(epsilon - np.sqrt(0.046 * 0.1521)) < 1e-15
    assert mix_lj(0.4, 0.046, 0.4, 0.046) == (0.4, 0.046)
    swapped = mix_lj(3.1506, 0.1521, 0.4, 0.046)
    assert swapped == (sigma, epsilon)
