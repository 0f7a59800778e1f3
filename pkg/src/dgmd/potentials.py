"""Potential terms expressed through interatomic distances.

Every bonded or nonbonded term used by the integrator is a function of the
distances between the particles it couples: pair terms of one distance, angle
terms of the three distances in the triangle (i, j, k) with vertex j, torsion
terms of the six distances among (i, j, k, l).  Writing the cosines through
distances is what lets the discrete gradients in `dgrad` assemble from plain
difference quotients of these functions.

The compiled scalar cores live in `kernels`; this module adds validation,
array broadcasting and the analytic distance-form gradients used by the
explicit integrator and the consistency checks.
"""

import math

import numpy as np

from . import kernels
from .core import GeometryError, minimum_image

DEGENERATE_REL = kernels.DEGENERATE_REL


def switch_eval(r, r_m, r_cut):
    """C^2 cutoff taper and first two derivatives: 1 below r_m, 0 above
    r_cut, quintic blend in between."""
    if not (0.0 <= r_m < r_cut):
        raise GeometryError(f"need 0 <= r_m < r_cut, got {r_m}, {r_cut}")
    if np.isscalar(r):
        return kernels.switch_scalar(float(r), r_m, r_cut)
    f = np.vectorize(kernels.switch_scalar, otypes=[float, float, float])
    return f(r, r_m, r_cut)


def lj_eval(r, sigma, epsilon, r_m=None, r_cut=None):
    """Lennard-Jones value and first two radial derivatives.

    With a cutoff the switched product U(r) s(r) is returned, which vanishes
    with two continuous derivatives at r_cut; r_m defaults to r_cut / 2.
    """
    if np.any(np.asarray(r) <= 0.0):
        raise GeometryError("LJ evaluated at non-positive distance")
    if r_cut is not None:
        if r_m is None:
            r_m = 0.5 * r_cut
        if not (0.0 <= r_m < r_cut):
            raise GeometryError(f"need 0 <= r_m < r_cut, got {r_m}, {r_cut}")
        code = kernels.PAIR_LJ_SWITCHED
    else:
        r_m = 0.0
        r_cut = 0.0
        code = kernels.PAIR_LJ
    if np.isscalar(r):
        return kernels.pair_vde(float(r), code, sigma, epsilon, r_m, r_cut)
    f = np.vectorize(kernels.pair_vde, otypes=[float, float, float])
    return f(r, code, sigma, epsilon, r_m, r_cut)


def bond_eval(r, k, r0):
    """Harmonic bond k (r - r0)^2 and first two derivatives."""
    d = np.asarray(r, dtype=float) - r0
    v, dv, d2v = k * d * d, 2.0 * k * d, 2.0 * k * np.ones_like(d)
    if np.isscalar(r):
        return float(v), float(dv), float(d2v)
    return v, dv, d2v


def cos_angle_from_distances(r_ji, r_jk, r_ik):
    """Law-of-cosines angle cosine at vertex j, clamped to [-1, 1]."""
    if r_ji <= 0.0 or r_jk <= 0.0:
        raise GeometryError("angle with zero-length arm")
    return kernels.angle_cos_scalar(r_ji, r_jk, r_ik)


def angle_eval_distances(r_ji, r_jk, r_ik, k, cos_theta0):
    """Angle-term value and its three distance partials."""
    if r_ji <= 0.0 or r_jk <= 0.0:
        raise GeometryError("angle with zero-length arm")
    v, da, db, dc = kernels.angle_partials_scalar(r_ji, r_jk, r_ik, k, cos_theta0)
    return v, np.array([da, db, dc])


def cos_dihedral_from_distances(r_ij, r_jk, r_kl, r_ik, r_jl, r_il):
    """Torsion cosine from the six pair distances.

    Raises GeometryError when i-j-k or j-k-l is collinear (the square-root
    arguments of the normalising factors are then non-positive).
    """
    s = np.array([r_ij, r_jk, r_kl, r_ik, r_jl, r_il], dtype=float)
    c, ok = kernels.dihedral_cos_scalar(s)
    if ok == 0.0:
        raise GeometryError("degenerate dihedral: collinear i-j-k or j-k-l")
    return c


def torsion_eval(cos_phi, k_phi, coeffs):
    """Cosine-polynomial torsion value and its derivative in cos phi."""
    coeffs = np.asarray(coeffs, dtype=float)
    v, dv = kernels.poly_d_scalar(float(cos_phi), coeffs)
    return k_phi * v, k_phi * dv


def dihedral_eval_distances(r_ij, r_jk, r_kl, r_ik, r_jl, r_il, k_phi, coeffs):
    """Torsion-term value and its six distance partials."""
    s = np.array([r_ij, r_jk, r_kl, r_ik, r_jl, r_il], dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    v, parts, ok = kernels.dihedral_partials_scalar(s, k_phi, coeffs)
    if ok == 0.0:
        raise GeometryError("degenerate dihedral: collinear i-j-k or j-k-l")
    return v, parts


def _deltas(points, box):
    def delta(a, b):
        d = np.asarray(points[b], dtype=float) - np.asarray(points[a], dtype=float)
        return minimum_image(d, box) if box is not None else d

    return delta


def angle_grad_distance_form(q_i, q_j, q_k, k, cos_theta0, box=None):
    """Analytic angle gradient via distance partials; rows (i, j, k)."""
    delta = _deltas({"i": q_i, "j": q_j, "k": q_k}, box)
    r_ji = delta("j", "i")
    r_jk = delta("j", "k")
    r_ik = delta("i", "k")
    a = float(np.linalg.norm(r_ji))
    b = float(np.linalg.norm(r_jk))
    c = float(np.linalg.norm(r_ik))
    _, (pa, pb, pc) = angle_eval_distances(a, b, c, k, cos_theta0)
    u_ji = r_ji / a
    u_jk = r_jk / b
    u_ik = r_ik / c if c > 0.0 else np.zeros(3)
    g = np.empty((3, 3))
    g[0] = pa * u_ji - pc * u_ik
    g[1] = -pa * u_ji - pb * u_jk
    g[2] = pb * u_jk + pc * u_ik
    return g


def dihedral_grad_distance_form(q_i, q_j, q_k, q_l, k_phi, coeffs, box=None):
    """Analytic torsion gradient via distance partials; rows (i, j, k, l)."""
    delta = _deltas({"i": q_i, "j": q_j, "k": q_k, "l": q_l}, box)
    vecs = [delta("i", "j"), delta("j", "k"), delta("k", "l"),
            delta("i", "k"), delta("j", "l"), delta("i", "l")]
    s = [float(np.linalg.norm(v)) for v in vecs]
    _, parts = dihedral_eval_distances(*s, k_phi, coeffs)
    u = [vec / d for vec, d in zip(vecs, s)]
    p_ij, p_jk, p_kl, p_ik, p_jl, p_il = parts
    g = np.empty((4, 3))
    g[0] = -p_ij * u[0] - p_ik * u[3] - p_il * u[5]
    g[1] = p_ij * u[0] - p_jk * u[1] - p_jl * u[4]
    g[2] = p_ik * u[3] + p_jk * u[1] - p_kl * u[2]
    g[3] = p_il * u[5] + p_jl * u[4] + p_kl * u[2]
    return g


def mix_lj(sigma_i, epsilon_i, sigma_j, epsilon_j):
    """Lorentz-Berthelot combination: arithmetic sigma, geometric epsilon."""
    return 0.5 * (sigma_i + sigma_j), math.sqrt(epsilon_i * epsilon_j)
