"""Discrete gradients of scalar potentials.

A discrete gradient g(u, u') of V satisfies

    dot(g(u, u'), u' - u) = V(u') - V(u)        (exact, not to truncation)
    g(u, u) = grad V(u)

Two constructions are provided: the midpoint form (single gradient
evaluation plus a secant correction) and the coordinate-increment form
(one-sided difference quotients swept through the coordinates).  The
coordinate-increment form comes in left/right/symmetric variants; only the
symmetric average is invariant under swapping the two arguments.

Term-level helpers apply the coordinate-increment construction in the
interparticle *distances* of a bond/LJ pair, an angle triple or a torsion
quadruple, then push the result back to cartesian coordinates.  That keeps
the conservation identity exact while making the discrete gradient
translation and rotation equivariant, so linear and angular momentum survive
the time discretisation as well.
"""

import numpy as np

from . import kernels
from .core import GeometryError, minimum_image
from .kernels import VARIANT_CODES


def variant_code(variant):
    try:
        return VARIANT_CODES[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; "
                         f"expected one of {sorted(VARIANT_CODES)}") from None


def gonzalez_dg(value, grad, u, uprime):
    """Midpoint discrete gradient of a callable potential.

    `value(x) -> float`, `grad(x) -> array`.  Coincident arguments reduce to
    the plain gradient at u.
    """
    u = np.asarray(u, dtype=float)
    uprime = np.asarray(uprime, dtype=float)
    d = uprime - u
    nsq = float(np.dot(d.ravel(), d.ravel()))
    mid = 0.5 * (u + uprime)
    g = np.asarray(grad(mid), dtype=float)
    if nsq == 0.0:
        return g
    corr = (float(value(uprime)) - float(value(u)) - float(np.dot(g.ravel(), d.ravel())))
    return g + (corr / nsq) * d


def itoh_abe_dg(value, u, uprime, variant="left", partial=None):
    """Coordinate-increment discrete gradient of a callable potential.

    Coordinates are swept in index order; component i is the difference
    quotient of V in coordinate i with the earlier coordinates already
    advanced.  A coordinate with exactly zero increment falls back to the
    partial derivative there: `partial(x, i)` when supplied, else a central
    difference.
    """
    code = variant_code(variant)
    if code == 2:
        left = itoh_abe_dg(value, u, uprime, "left", partial)
        right = itoh_abe_dg(value, u, uprime, "right", partial)
        return 0.5 * (left + right)
    u = np.asarray(u, dtype=float)
    uprime = np.asarray(uprime, dtype=float)
    if code == 1:
        return itoh_abe_dg(value, uprime, u, "left", partial)
    state = u.copy()
    g = np.zeros_like(u)
    v_prev = float(value(state))
    for i in range(u.size):
        du = uprime.flat[i] - state.flat[i]
        if du == 0.0:
            if partial is not None:
                g.flat[i] = partial(state, i)
            else:
                h = 1e-6 * (1.0 + abs(state.flat[i]))
                lo = state.copy()
                hi = state.copy()
                lo.flat[i] -= h
                hi.flat[i] += h
                g.flat[i] = (float(value(hi)) - float(value(lo))) / (2.0 * h)
            continue
        state.flat[i] = uprime.flat[i]
        v_next = float(value(state))
        g.flat[i] = (v_next - v_prev) / du
        v_prev = v_next
    return g


class PairPotential:
    """Radial potential for a particle pair, dispatched inside the kernels."""

    def __init__(self, code, p0=0.0, p1=0.0, p2=0.0, p3=0.0):
        self.code = code
        self.params = (float(p0), float(p1), float(p2), float(p3))

    @classmethod
    def lennard_jones(cls, sigma, epsilon, r_cut=None):
        if r_cut is None:
            return cls(kernels.PAIR_LJ, sigma, epsilon)
        return cls(kernels.PAIR_LJ_SWITCHED, sigma, epsilon, 0.5 * r_cut, r_cut)

    @classmethod
    def harmonic_bond(cls, k, r0):
        return cls(kernels.PAIR_BOND, k, r0)

    def value(self, r):
        v, _, _ = kernels.pair_vde(float(r), self.code, *self.params)
        return v

    def derivative(self, r):
        _, dv, _ = kernels.pair_vde(float(r), self.code, *self.params)
        return dv

    def second(self, r):
        _, _, d2v = kernels.pair_vde(float(r), self.code, *self.params)
        return d2v


def _term_views(x, u, box):
    """Shift every atom next to atom 0 under the minimum-image rule.

    The shift is chosen from the current positions x and reused for the
    trial positions u, so both geometries live in the same periodic copy.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if box is None or not box.periodic:
        return x, u
    shift = minimum_image(x - x[0], box) - (x - x[0])
    return x + shift, u + shift


def pairwise_dg(x_i, x_j, u_i, u_j, pot, box=None):
    """Discrete gradient of a radial pair term.

    Returns (g_i, g_j, v_x, v_u) with g the gradient rows of the two atoms.
    The x->u difference quotient in the distance makes the conservation
    identity exact; coincident distances use the analytic derivative at the
    midpoint.
    """
    x, u = _term_views(np.array([x_i, x_j], dtype=float),
                       np.array([u_i, u_j], dtype=float), box)
    gj, vq, vu = kernels.pair_dg_kernel(
        x[0:1], x[1:2], u[0:1], u[1:2],
        np.array([pot.code], np.int64),
        *[np.array([p]) for p in pot.params])
    return -gj[0], gj[0], float(vq[0]), float(vu[0])


def pairwise_force(x_i, x_j, pot, box=None):
    x, _ = _term_views(np.array([x_i, x_j], dtype=float),
                       np.array([x_i, x_j], dtype=float), box)
    fj, v = kernels.pair_force_kernel(
        x[0:1], x[1:2],
        np.array([pot.code], np.int64),
        *[np.array([p]) for p in pot.params])
    return -fj[0], fj[0], float(v[0])


def angle_dg(x, u, k, cos_theta0, variant="left", box=None):
    """Discrete gradient of one angle term; rows are (i, vertex, k)."""
    xv, uv = _term_views(x, u, box)
    g, vq, vu = kernels.angle_dg_kernel(
        xv[None], uv[None], np.array([k]), np.array([cos_theta0]),
        variant_code(variant))
    return g[0], float(vq[0]), float(vu[0])


def angle_force(x, k, cos_theta0, box=None):
    xv, _ = _term_views(x, x, box)
    g, v = kernels.angle_force_kernel(xv[None], np.array([k]),
                                      np.array([cos_theta0]))
    return g[0], float(v[0])


def dihedral_dg(x, u, k_phi, coeffs, variant="left", box=None):
    """Discrete gradient of one torsion term; rows are the chain (i,j,k,l)."""
    xv, uv = _term_views(x, u, box)
    coeffs = np.asarray(coeffs, dtype=float)
    g, vq, vu, ok = kernels.dihedral_dg_kernel(
        xv[None], uv[None], np.array([k_phi]), coeffs[None],
        variant_code(variant))
    if not ok:
        raise GeometryError("collinear atoms leave the torsion angle undefined")
    return g[0], float(vq[0]), float(vu[0])


def dihedral_force(x, k_phi, coeffs, box=None):
    xv, _ = _term_views(x, x, box)
    coeffs = np.asarray(coeffs, dtype=float)
    g, v, ok = kernels.dihedral_force_kernel(xv[None], np.array([k_phi]),
                                             coeffs[None])
    if not ok:
        raise GeometryError("collinear atoms leave the torsion angle undefined")
    return g[0], float(v[0])
