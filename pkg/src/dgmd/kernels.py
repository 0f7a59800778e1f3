"""Compiled per-term loops for potentials, discrete gradients and operators.

Every kernel works on "view" coordinates: positions already shifted into a
common frame (periodic images resolved), so geometry is plain subtraction.
Pair kernels return the contribution on the second atom j; the first atom
receives the negative.  Angle/dihedral kernels return one row per atom slot.

Trial-position quotients fall back to the analytic partial derivative at the
distance midpoint once primed and unprimed distances agree to DEGENERATE_REL.
The threshold balances two error floors: the raw quotient carries rounding
noise eps*|V|/|ds|, which wrecks Newton residuals for near-stationary
coordinates, while the midpoint branch perturbs the telescoped energy balance
by only V'''*ds^3/24 (zero for harmonic bonds).  At 1e-6 both sit at or below
the double-precision assembly floor.

Pair potential codes: 0 bare LJ (p0=sigma, p1=epsilon), 1 switched LJ
(p2=r_m, p3=r_cut), 2 harmonic bond (p0=k, p1=r0).
DG variant codes: 0 left, 1 right, 2 symmetric.
"""

import math

import numpy as np
from numba import njit

DEGENERATE_REL = 1e-6

PAIR_LJ = 0
PAIR_LJ_SWITCHED = 1
PAIR_BOND = 2

VARIANT_CODES = {"left": 0, "right": 1, "symmetric": 2}


@njit(cache=True)
def switch_scalar(r, r_m, r_cut):
    if r <= r_m:
        return 1.0, 0.0, 0.0
    if r >= r_cut:
        return 0.0, 0.0, 0.0
    w = r_cut - r_m
    x = (r - r_m) / w
    omx = 1.0 - x
    s = omx * omx * omx * (1.0 + 3.0 * x + 6.0 * x * x)
    ds = -30.0 * x * x * omx * omx / w
    d2s = -60.0 * x * omx * (1.0 - 2.0 * x) / (w * w)
    return s, ds, d2s


@njit(cache=True)
def lj_bare_scalar(r, sigma, epsilon):
    sr2 = (sigma / r) ** 2
    sr6 = sr2 * sr2 * sr2
    sr12 = sr6 * sr6
    v = 4.0 * epsilon * (sr12 - sr6)
    dv = 4.0 * epsilon * (-12.0 * sr12 + 6.0 * sr6) / r
    d2v = 4.0 * epsilon * (156.0 * sr12 - 42.0 * sr6) / (r * r)
    return v, dv, d2v


@njit(cache=True)
def pair_vde(r, code, p0, p1, p2, p3):
    """Pair potential value and first two radial derivatives."""
    if code == 2:
        d = r - p1
        return p0 * d * d, 2.0 * p0 * d, 2.0 * p0
    if code == 1:
        if r >= p3:
            return 0.0, 0.0, 0.0
        u, du, d2u = lj_bare_scalar(r, p0, p1)
        if r <= p2:
            return u, du, d2u
        s, ds, d2s = switch_scalar(r, p2, p3)
        return u * s, du * s + u * ds, d2u * s + 2.0 * du * ds + u * d2s
    return lj_bare_scalar(r, p0, p1)


@njit(cache=True)
def angle_cos_scalar(r_ji, r_jk, r_ik):
    # No clamping: discrete-gradient sweeps pass through distance triples
    # that no 3-d geometry realises, where this quotient may leave [-1, 1]
    # by a sliver.  The potentials are polynomials in the cosine, so the
    # smooth continuation is the correct (and conservative) choice.
    return (r_ji * r_ji + r_jk * r_jk - r_ik * r_ik) / (2.0 * r_ji * r_jk)


@njit(cache=True)
def angle_value_scalar(r_ji, r_jk, r_ik, k, cos0):
    c = angle_cos_scalar(r_ji, r_jk, r_ik)
    d = c - cos0
    return k * d * d


@njit(cache=True)
def angle_partials_scalar(r_ji, r_jk, r_ik, k, cos0):
    a, b, c = r_ji, r_jk, r_ik
    cos = angle_cos_scalar(a, b, c)
    d = cos - cos0
    v = k * d * d
    dv = 2.0 * k * d
    da = dv * (a * a - b * b + c * c) / (2.0 * a * a * b)
    db = dv * (b * b - a * a + c * c) / (2.0 * a * b * b)
    dc = dv * (-c / (a * b))
    return v, da, db, dc


@njit(cache=True)
def poly_scalar(c, coeffs):
    v = 0.0
    for i in range(coeffs.shape[0] - 1, -1, -1):
        v = v * c + coeffs[i]
    return v


@njit(cache=True)
def poly_d_scalar(c, coeffs):
    v = 0.0
    dv = 0.0
    for i in range(coeffs.shape[0] - 1, -1, -1):
        dv = dv * c + v
        v = v * c + coeffs[i]
    return v, dv


@njit(cache=True)
def dihedral_cos_scalar(s):
    """Torsion cosine from the six distances (r_ij, r_jk, r_kl, r_ik, r_jl,
    r_il); second return is 0.0 on a degenerate (collinear) frame."""
    x1 = s[0] * s[0]
    x2 = s[1] * s[1]
    x3 = s[2] * s[2]
    x4 = s[3] * s[3]
    x5 = s[4] * s[4]
    x6 = s[5] * s[5]
    A = x1 + x2 - x4
    B = x3 + x2 - x5
    C = x2 + x6 - x5 - x4
    num = A * B - 2.0 * x2 * C
    d1sq = 4.0 * x2 * x1 - A * A
    d2sq = 4.0 * x2 * x3 - B * B
    if d1sq <= 0.0 or d2sq <= 0.0:
        return 0.0, 0.0
    # Unclamped for the same reason as angle_cos_scalar: inconsistent
    # distance six-tuples from sweep states need the smooth continuation.
    return num / (math.sqrt(d1sq) * math.sqrt(d2sq)), 1.0


@njit(cache=True)
def dihedral_value_scalar(s, k_phi, coeffs):
    c, ok = dihedral_cos_scalar(s)
    return k_phi * poly_scalar(c, coeffs), ok


@njit(cache=True)
def dihedral_partials_scalar(s, k_phi, coeffs):
    """Torsion value and its six distance partials; parts[6] slots."""
    parts = np.zeros(6)
    x1 = s[0] * s[0]
    x2 = s[1] * s[1]
    x3 = s[2] * s[2]
    x4 = s[3] * s[3]
    x5 = s[4] * s[4]
    x6 = s[5] * s[5]
    A = x1 + x2 - x4
    B = x3 + x2 - x5
    C = x2 + x6 - x5 - x4
    num = A * B - 2.0 * x2 * C
    d1sq = 4.0 * x2 * x1 - A * A
    d2sq = 4.0 * x2 * x3 - B * B
    if d1sq <= 0.0 or d2sq <= 0.0:
        return 0.0, parts, 0.0
    den1 = math.sqrt(d1sq)
    den2 = math.sqrt(d2sq)
    den = den1 * den2
    c = num / den
    # Same smooth continuation as dihedral_cos_scalar: the polynomial and
    # its derivative are evaluated at the raw quotient so the partials stay
    # consistent with the value function on inconsistent distance tuples.
    v, dpoly = poly_d_scalar(c, coeffs)
    dv_dc = k_phi * dpoly

    dnum = np.empty(6)
    dnum[0] = B
    dnum[1] = A + B - 2.0 * C - 2.0 * x2
    dnum[2] = A
    dnum[3] = 2.0 * x2 - B
    dnum[4] = 2.0 * x2 - A
    dnum[5] = -2.0 * x2
    dden1 = np.zeros(6)
    dden1[0] = (2.0 * x2 - A) / den1
    dden1[1] = (2.0 * x1 - A) / den1
    dden1[3] = A / den1
    dden2 = np.zeros(6)
    dden2[1] = (2.0 * x3 - B) / den2
    dden2[2] = (2.0 * x2 - B) / den2
    dden2[4] = B / den2
    for m in range(6):
        dc_dx = dnum[m] / den - c * (dden1[m] / den1 + dden2[m] / den2)
        parts[m] = dv_dc * dc_dx * 2.0 * s[m]
    return k_phi * v, parts, 1.0


@njit(cache=True)
def pair_active_kernel(xi, xj, ui, uj, r_keep):
    """Pairs whose current or trial separation is within r_keep."""
    m = xi.shape[0]
    mask = np.zeros(m, dtype=np.bool_)
    keep2 = r_keep * r_keep
    for t in range(m):
        r2 = 0.0
        rp2 = 0.0
        for a in range(3):
            d = xj[t, a] - xi[t, a]
            r2 += d * d
            d = uj[t, a] - ui[t, a]
            rp2 += d * d
        if r2 <= keep2 or rp2 <= keep2:
            mask[t] = True
    return mask


@njit(cache=True)
def pair_distance_kernel(xi, xj):
    m = xi.shape[0]
    r = np.empty(m)
    for t in range(m):
        r2 = 0.0
        for a in range(3):
            d = xj[t, a] - xi[t, a]
            r2 += d * d
        r[t] = math.sqrt(r2)
    return r


@njit(cache=True)
def pair_dg_kernel(xi, xj, ui, uj, code, p0, p1, p2, p3):
    """Pairwise discrete gradient; symmetric in (q, q') by construction.

    Returns (g_j, V(q), V(q')); g_i = -g_j.
    """
    m = xi.shape[0]
    gj = np.empty((m, 3))
    vq = np.empty(m)
    vu = np.empty(m)
    for t in range(m):
        r2 = 0.0
        rp2 = 0.0
        for a in range(3):
            d = xj[t, a] - xi[t, a]
            r2 += d * d
            d = uj[t, a] - ui[t, a]
            rp2 += d * d
        r = math.sqrt(r2)
        rp = math.sqrt(rp2)
        v, _, _ = pair_vde(r, code[t], p0[t], p1[t], p2[t], p3[t])
        vp, _, _ = pair_vde(rp, code[t], p0[t], p1[t], p2[t], p3[t])
        vq[t] = v
        vu[t] = vp
        ds = rp - r
        if abs(ds) <= DEGENERATE_REL * (1.0 + r):
            _, delta, _ = pair_vde(0.5 * (r + rp), code[t],
                                   p0[t], p1[t], p2[t], p3[t])
        else:
            delta = (vp - v) / ds
        denom = r + rp
        for a in range(3):
            w = ((xj[t, a] - xi[t, a]) + (uj[t, a] - ui[t, a])) / denom
            gj[t, a] = delta * w
    return gj, vq, vu


@njit(cache=True)
def pair_force_kernel(xi, xj, code, p0, p1, p2, p3):
    """Analytic gradient rows on atom j plus per-pair potential values."""
    m = xi.shape[0]
    fj = np.empty((m, 3))
    v = np.empty(m)
    for t in range(m):
        r2 = 0.0
        for a in range(3):
            d = xj[t, a] - xi[t, a]
            r2 += d * d
        r = math.sqrt(r2)
        val, dv, _ = pair_vde(r, code[t], p0[t], p1[t], p2[t], p3[t])
        v[t] = val
        for a in range(3):
            fj[t, a] = dv * (xj[t, a] - xi[t, a]) / r
    return fj, v


@njit(cache=True)
def pair_hessvec_kernel(xi, xj, vi, vj, code, p0, p1, p2, p3):
    """Pair-term Hessian action h on atom j for direction (vi, vj)."""
    m = xi.shape[0]
    h = np.empty((m, 3))
    for t in range(m):
        r2 = 0.0
        for a in range(3):
            d = xj[t, a] - xi[t, a]
            r2 += d * d
        r = math.sqrt(r2)
        _, dv, d2v = pair_vde(r, code[t], p0[t], p1[t], p2[t], p3[t])
        un = 0.0
        for a in range(3):
            un += (xj[t, a] - xi[t, a]) / r * (vj[t, a] - vi[t, a])
        for a in range(3):
            u = (xj[t, a] - xi[t, a]) / r
            dvv = vj[t, a] - vi[t, a]
            h[t, a] = d2v * un * u + dv / r * (dvv - un * u)
    return h


@njit(cache=True)
def pair_dgjac_kernel(xi, xj, ui, uj, vi, vj, code, p0, p1, p2, p3):
    """Directional derivative of the pairwise DG in the trial argument."""
    m = xi.shape[0]
    out = np.empty((m, 3))
    for t in range(m):
        r2 = 0.0
        rp2 = 0.0
        for a in range(3):
            d = xj[t, a] - xi[t, a]
            r2 += d * d
            d = uj[t, a] - ui[t, a]
            rp2 += d * d
        r = math.sqrt(r2)
        rp = math.sqrt(rp2)
        v, _, _ = pair_vde(r, code[t], p0[t], p1[t], p2[t], p3[t])
        vp, dvp, _ = pair_vde(rp, code[t], p0[t], p1[t], p2[t], p3[t])
        drp = 0.0
        for a in range(3):
            drp += (uj[t, a] - ui[t, a]) / rp * (vj[t, a] - vi[t, a])
        ds = rp - r
        if abs(ds) <= DEGENERATE_REL * (1.0 + r):
            mid = 0.5 * (r + rp)
            _, delta, d2mid = pair_vde(mid, code[t], p0[t], p1[t], p2[t], p3[t])
            ddelta = 0.5 * d2mid * drp
        else:
            delta = (vp - v) / ds
            ddelta = (dvp - delta) / ds * drp
        denom = r + rp
        for a in range(3):
            w = ((xj[t, a] - xi[t, a]) + (uj[t, a] - ui[t, a])) / denom
            dw = (vj[t, a] - vi[t, a]) / denom - w * drp / denom
            out[t, a] = ddelta * w + delta * dw
    return out


@njit(cache=True)
def _angle_partial_m(s, m, k, cos0):
    _, da, db, dc = angle_partials_scalar(s[0], s[1], s[2], k, cos0)
    if m == 0:
        return da
    if m == 1:
        return db
    return dc


@njit(cache=True)
def _angle_sweep(s0, sp, k, cos0):
    """Left coordinate-increment quotients for one angle term."""
    delta = np.empty(3)
    cur = np.empty(3)
    for a in range(3):
        cur[a] = s0[a]
    v_prev = angle_value_scalar(cur[0], cur[1], cur[2], k, cos0)
    v_first = v_prev
    for m in range(3):
        ds = sp[m] - s0[m]
        if abs(ds) <= DEGENERATE_REL * (1.0 + abs(s0[m])):
            cur[m] = 0.5 * (s0[m] + sp[m])
            delta[m] = _angle_partial_m(cur, m, k, cos0)
            cur[m] = sp[m]
            v_prev = angle_value_scalar(cur[0], cur[1], cur[2], k, cos0)
        else:
            cur[m] = sp[m]
            v_new = angle_value_scalar(cur[0], cur[1], cur[2], k, cos0)
            delta[m] = (v_new - v_prev) / ds
            v_prev = v_new
    return delta, v_first, v_prev


@njit(cache=True)
def angle_dg_kernel(x, u, k, cos0, variant):
    """Angle discrete gradient rows for atom slots (i, j, k)."""
    m = x.shape[0]
    g = np.zeros((m, 3, 3))
    vq = np.empty(m)
    vu = np.empty(m)
    s0 = np.empty(3)
    sp = np.empty(3)
    for t in range(m):
        s0[0] = math.sqrt((x[t, 0, 0] - x[t, 1, 0]) ** 2 +
                          (x[t, 0, 1] - x[t, 1, 1]) ** 2 +
                          (x[t, 0, 2] - x[t, 1, 2]) ** 2)
        s0[1] = math.sqrt((x[t, 2, 0] - x[t, 1, 0]) ** 2 +
                          (x[t, 2, 1] - x[t, 1, 1]) ** 2 +
                          (x[t, 2, 2] - x[t, 1, 2]) ** 2)
        s0[2] = math.sqrt((x[t, 2, 0] - x[t, 0, 0]) ** 2 +
                          (x[t, 2, 1] - x[t, 0, 1]) ** 2 +
                          (x[t, 2, 2] - x[t, 0, 2]) ** 2)
        sp[0] = math.sqrt((u[t, 0, 0] - u[t, 1, 0]) ** 2 +
                          (u[t, 0, 1] - u[t, 1, 1]) ** 2 +
                          (u[t, 0, 2] - u[t, 1, 2]) ** 2)
        sp[1] = math.sqrt((u[t, 2, 0] - u[t, 1, 0]) ** 2 +
                          (u[t, 2, 1] - u[t, 1, 1]) ** 2 +
                          (u[t, 2, 2] - u[t, 1, 2]) ** 2)
        sp[2] = math.sqrt((u[t, 2, 0] - u[t, 0, 0]) ** 2 +
                          (u[t, 2, 1] - u[t, 0, 1]) ** 2 +
                          (u[t, 2, 2] - u[t, 0, 2]) ** 2)
        if variant == 0:
            delta, v0, v1 = _angle_sweep(s0, sp, k[t], cos0[t])
        elif variant == 1:
            delta, v1, v0 = _angle_sweep(sp, s0, k[t], cos0[t])
        else:
            dl, v0, v1 = _angle_sweep(s0, sp, k[t], cos0[t])
            dr, _, _ = _angle_sweep(sp, s0, k[t], cos0[t])
            delta = 0.5 * (dl + dr)
        vq[t] = v0
        vu[t] = v1
        # Direction factors (vec' + vec) / (r' + r) per coupled distance.
        den_ji = s0[0] + sp[0]
        den_jk = s0[1] + sp[1]
        den_ik = s0[2] + sp[2]
        for a in range(3):
            d_ji = ((x[t, 0, a] - x[t, 1, a]) + (u[t, 0, a] - u[t, 1, a])) / den_ji
            d_jk = ((x[t, 2, a] - x[t, 1, a]) + (u[t, 2, a] - u[t, 1, a])) / den_jk
            if den_ik > 0.0:
                d_ik = ((x[t, 2, a] - x[t, 0, a]) + (u[t, 2, a] - u[t, 0, a])) / den_ik
            else:
                d_ik = 0.0
            g[t, 0, a] = delta[0] * d_ji - delta[2] * d_ik
            g[t, 1, a] = -delta[0] * d_ji - delta[1] * d_jk
            g[t, 2, a] = delta[1] * d_jk + delta[2] * d_ik
    return g, vq, vu


@njit(cache=True)
def angle_force_kernel(x, k, cos0):
    """Analytic angle gradients assembled from distance partials."""
    m = x.shape[0]
    g = np.zeros((m, 3, 3))
    v = np.empty(m)
    for t in range(m):
        a = math.sqrt((x[t, 0, 0] - x[t, 1, 0]) ** 2 +
                      (x[t, 0, 1] - x[t, 1, 1]) ** 2 +
                      (x[t, 0, 2] - x[t, 1, 2]) ** 2)
        b = math.sqrt((x[t, 2, 0] - x[t, 1, 0]) ** 2 +
                      (x[t, 2, 1] - x[t, 1, 1]) ** 2 +
                      (x[t, 2, 2] - x[t, 1, 2]) ** 2)
        c = math.sqrt((x[t, 2, 0] - x[t, 0, 0]) ** 2 +
                      (x[t, 2, 1] - x[t, 0, 1]) ** 2 +
                      (x[t, 2, 2] - x[t, 0, 2]) ** 2)
        val, pa, pb, pc = angle_partials_scalar(a, b, c, k[t], cos0[t])
        v[t] = val
        for q in range(3):
            u_ji = (x[t, 0, q] - x[t, 1, q]) / a
            u_jk = (x[t, 2, q] - x[t, 1, q]) / b
            u_ik = (x[t, 2, q] - x[t, 0, q]) / c if c > 0.0 else 0.0
            g[t, 0, q] = pa * u_ji - pc * u_ik
            g[t, 1, q] = -pa * u_ji - pb * u_jk
            g[t, 2, q] = pb * u_jk + pc * u_ik
    return g, v


# Dihedral distance slots, as (atom_a, atom_b) index pairs into the 4 views:
# r_ij, r_jk, r_kl, r_ik, r_jl, r_il.
_DIH_A = np.array([0, 1, 2, 0, 1, 0], dtype=np.int64)
_DIH_B = np.array([1, 2, 3, 2, 3, 3], dtype=np.int64)


@njit(cache=True)
def _dih_distances(x, t, out):
    for m in range(6):
        a = _DIH_A[m]
        b = _DIH_B[m]
        out[m] = math.sqrt((x[t, b, 0] - x[t, a, 0]) ** 2 +
                           (x[t, b, 1] - x[t, a, 1]) ** 2 +
                           (x[t, b, 2] - x[t, a, 2]) ** 2)


@njit(cache=True)
def _dih_sweep(s0, sp, k_phi, coeffs):
    """Left coordinate-increment quotients over the six distances."""
    delta = np.zeros(6)
    cur = np.empty(6)
    for a in range(6):
        cur[a] = s0[a]
    v_prev, ok = dihedral_value_scalar(cur, k_phi, coeffs)
    v_first = v_prev
    if ok == 0.0:
        return delta, v_first, v_prev, 0.0
    for m in range(6):
        ds = sp[m] - s0[m]
        if abs(ds) <= DEGENERATE_REL * (1.0 + abs(s0[m])):
            cur[m] = 0.5 * (s0[m] + sp[m])
            _, parts, ok = dihedral_partials_scalar(cur, k_phi, coeffs)
            if ok == 0.0:
                return delta, v_first, v_prev, 0.0
            delta[m] = parts[m]
            cur[m] = sp[m]
            v_prev, ok = dihedral_value_scalar(cur, k_phi, coeffs)
            if ok == 0.0:
                return delta, v_first, v_prev, 0.0
        else:
            cur[m] = sp[m]
            v_new, ok = dihedral_value_scalar(cur, k_phi, coeffs)
            if ok == 0.0:
                return delta, v_first, v_prev, 0.0
            delta[m] = (v_new - v_prev) / ds
            v_prev = v_new
    return delta, v_first, v_prev, 1.0


@njit(cache=True)
def dihedral_dg_kernel(x, u, k_phi, coeffs, variant):
    """Torsion discrete gradient rows for atom slots (i, j, k, l)."""
    m = x.shape[0]
    g = np.zeros((m, 4, 3))
    vq = np.empty(m)
    vu = np.empty(m)
    ok = np.ones(m)
    s0 = np.empty(6)
    sp = np.empty(6)
    for t in range(m):
        _dih_distances(x, t, s0)
        _dih_distances(u, t, sp)
        if variant == 0:
            delta, v0, v1, flag = _dih_sweep(s0, sp, k_phi[t], coeffs[t])
        elif variant == 1:
            delta, v1, v0, flag = _dih_sweep(sp, s0, k_phi[t], coeffs[t])
        else:
            dl, v0, v1, f1 = _dih_sweep(s0, sp, k_phi[t], coeffs[t])
            dr, _, _, f2 = _dih_sweep(sp, s0, k_phi[t], coeffs[t])
            flag = f1 * f2
            delta = 0.5 * (dl + dr) if flag != 0.0 else dl
        if flag == 0.0:
            ok[t] = 0.0
            vq[t] = 0.0
            vu[t] = 0.0
            continue
        vq[t] = v0
        vu[t] = v1
        for s in range(6):
            a = _DIH_A[s]
            b = _DIH_B[s]
            den = s0[s] + sp[s]
            if den <= 0.0:
                continue
            for q in range(3):
                d = ((x[t, b, q] - x[t, a, q]) + (u[t, b, q] - u[t, a, q])) / den
                g[t, a, q] -= delta[s] * d
                g[t, b, q] += delta[s] * d
    return g, vq, vu, ok


@njit(cache=True)
def dihedral_force_kernel(x, k_phi, coeffs):
    """Analytic torsion gradients assembled from distance partials."""
    m = x.shape[0]
    g = np.zeros((m, 4, 3))
    v = np.empty(m)
    ok = np.ones(m)
    s0 = np.empty(6)
    for t in range(m):
        _dih_distances(x, t, s0)
        val, parts, flag = dihedral_partials_scalar(s0, k_phi[t], coeffs[t])
        if flag == 0.0:
            ok[t] = 0.0
            v[t] = 0.0
            continue
        v[t] = val
        for s in range(6):
            a = _DIH_A[s]
            b = _DIH_B[s]
            for q in range(3):
                d = (x[t, b, q] - x[t, a, q]) / s0[s]
                g[t, a, q] -= parts[s] * d
                g[t, b, q] += parts[s] * d
    return g, v, ok
