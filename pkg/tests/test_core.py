import numpy as np
import pytest

from dgmd.core import (
    Box,
    ConfigurationError,
    DIAGNOSTICS_HEADER,
    DiagnosticsRecord,
    ParticleSystem,
    UnitScale,
    kinetic_energy,
    minimum_image,
    total_angular_momentum,
    total_linear_momentum,
    wrap_positions,
)

from conftest import load_experiment, make_experiment_engine


def test_minimum_image_free_space_identity():
    box = Box(False)
    d = np.array([149.0, -75.0, 0.3])
    assert np.array_equal(minimum_image(d, box), d)


def test_minimum_image_examples():
    box = Box(True, [150.0, 150.0, 150.0])
    out = minimum_image(np.array([149.0, 0.0, 0.0]), box)
    assert np.allclose(out, [-1.0, 0.0, 0.0])
    # -75 sits exactly on the lower half-open boundary and must stay put
    out = minimum_image(np.array([-75.0, 0.0, 0.0]), box)
    assert out[0] == -75.0
    out = minimum_image(np.array([75.0, 0.0, 0.0]), box)
    assert out[0] == -75.0


def test_minimum_image_properties():
    rng = np.random.default_rng(3)
    box = Box(True, [7.0, 11.0, 150.0])
    d = rng.uniform(-400, 400, size=(200, 3))
    m = minimum_image(d, box)
    assert np.all(m >= -box.lengths / 2) and np.all(m < box.lengths / 2)
    # idempotent and never longer than the raw separation
    assert np.array_equal(minimum_image(m, box), m)
    assert np.all(np.abs(m) <= np.abs(d) + 1e-12)


def test_wrap_positions():
    box = Box(True, [10.0, 10.0, 10.0])
    q = np.array([[10.0, -0.1, 25.0], [3.0, 4.0, 5.0]])
    w = wrap_positions(q, box)
    assert np.all(w >= 0) and np.all(w < 10.0)
    assert np.allclose(w[0], [0.0, 9.9, 5.0])
    assert np.array_equal(w[1], q[1])
    free = Box(False)
    assert wrap_positions(q, free) is q


def test_box_validation():
    with pytest.raises(ConfigurationError):
        Box(True)
    with pytest.raises(ConfigurationError):
        Box(True, [1.0, -1.0, 1.0])
    with pytest.raises(ConfigurationError):
        Box(True, [1.0, 1.0])
    with pytest.raises(ConfigurationError):
        Box(False, [1.0, 1.0, 1.0])
    box = Box(True, [10.0, 10.0, 6.0])
    box.require_cutoff_fits(2.5)
    with pytest.raises(ConfigurationError):
        box.require_cutoff_fits(3.0)
    Box(False).require_cutoff_fits(1e9)


def test_particle_system_validation():
    q = np.zeros((2, 3))
    p = np.zeros((2, 3))
    ok = ParticleSystem(q, p, np.ones(2), np.zeros(2, np.int64),
                        np.full(2, -1, np.int64), np.arange(2))
    assert ok.n == 2
    c = ok.copy()
    c.q[0, 0] = 99.0
    assert ok.q[0, 0] == 0.0
    with pytest.raises(ConfigurationError):
        ParticleSystem(np.zeros((2, 2)), p, np.ones(2), np.zeros(2, np.int64),
                       np.full(2, -1, np.int64), np.arange(2))
    with pytest.raises(ConfigurationError):
        ParticleSystem(q, p, np.array([1.0, 0.0]), np.zeros(2, np.int64),
                       np.full(2, -1, np.int64), np.arange(2))
    with pytest.raises(ConfigurationError):
        ParticleSystem(q, p, np.ones(2), np.zeros(2, np.int64),
                       np.full(2, -1, np.int64), np.array([0, 0]))
    with pytest.raises(ConfigurationError):
        ParticleSystem(q, p, np.ones(2), np.zeros(2, np.int64),
                       np.full(2, -1, np.int64), np.array([1, 0]))


def test_kinetic_energy():
    assert kinetic_energy(np.zeros((3, 3)), np.ones(3)) == 0.0
    k = kinetic_energy(np.array([[2.0, 0.0, 0.0]]), np.array([2.0]))
    assert k == 1.0


def test_momentum_sums():
    p = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
    assert np.array_equal(total_linear_momentum(p), np.zeros(3))
    assert np.array_equal(total_linear_momentum(p[:1]), p[0])
    assert np.array_equal(total_linear_momentum(np.zeros((0, 3))), np.zeros(3))
    assert np.array_equal(total_angular_momentum(np.zeros((0, 3)),
                                                 np.zeros((0, 3))), np.zeros(3))


def test_two_particle_invariants_match_hand_values():
    _, eng = make_experiment_engine("two_lj")
    system = eng.system
    assert kinetic_energy(system.p, system.mass) == 1.0
    assert np.array_equal(total_linear_momentum(system.p), np.zeros(3))
    lz = float(sum(system.q[i, 0] * system.p[i, 1]
                   - system.q[i, 1] * system.p[i, 0]
                   for i in range(system.n)))
    L = total_angular_momentum(system.q, system.p)
    assert abs(L[2] - lz) < 1e-14
    assert abs(lz - 1.010216) < 1e-12
    assert abs(L[0]) < 1e-14 and abs(L[1]) < 1e-14


def test_two_particle_initial_energy_oracle():
    cfg, eng = make_experiment_engine("two_lj")
    system = eng.system
    r = float(np.linalg.norm(system.q[1] - system.q[0]))
    sigma, epsilon = 1.0, 5.0
    sr6 = (sigma / r) ** 6
    v = 4.0 * epsilon * (sr6 * sr6 - sr6)
    h0 = kinetic_energy(system.p, system.mass) + eng.potential(system.q)
    assert abs((v + 1.0) - h0) < 1e-14
    assert abs(h0 - (-0.11324884708285943)) < 1e-14


def test_unit_scale_water():
    scale = UnitScale(1e-10, 4184.0, 1.0)
    assert abs(scale.time_s - 4.88e-14) / 4.88e-14 < 5e-3


def test_unit_scale_butane():
    scale = UnitScale(1e-9, 1000.0, 1.0)
    assert abs(scale.time_s - 1e-12) / 1e-12 < 1e-3


def test_unit_scale_validation():
    with pytest.raises(ConfigurationError):
        UnitScale(0.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        UnitScale(1e-10, -4184.0, 1.0)


def test_diagnostics_record_row_matches_header():
    rec = DiagnosticsRecord(step=3, time=0.015, kinetic=1.0, potential=-1.1,
                            total=-0.1, momentum=np.array([0.0, 0.0, 0.0]),
                            angular_momentum=np.array([0.0, 0.0, 1.01]),
                            newton_iterations=4, cg_iterations=9)
    row = rec.as_row()
    assert len(row) == len(DIAGNOSTICS_HEADER.split(","))
    assert row[0] == 3 and row[-2] == 4 and row[-1] == 9
    assert row[4] == -0.1 and row[10] == 1.01
