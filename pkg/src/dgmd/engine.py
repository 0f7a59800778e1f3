"""System-level assembly of potentials, forces and discrete gradients.

The direct-sum engine below visits every nonbonded pair; it is the reference
implementation used for free-space systems and small tests.  The cell-list
and rank-decomposed engines in `spatial` reuse the same per-class kernels
and reduce contributions in the same fixed term order, which is what makes
their results reproducible against this one.

Reduction order contract: contributions are concatenated class-major
(bonds, angles, torsions, nonbonded pairs), slot-major inside a class, with
terms in canonically sorted index order, then scattered with one bincount
per component.  Potential subtotals are summed per class in that same order.
All engines must follow it so that equal inputs give bit-equal outputs.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import Box, ConfigurationError, GeometryError, minimum_image
from .dgrad import variant_code
from .forcefield import derive_topology, validate_forcefield


@dataclass
class ForceEvaluation:
    gradient: np.ndarray     # dV/dq, one row per particle
    potential: float


@dataclass
class DGEvaluation:
    gradient: np.ndarray     # discrete gradient rows
    v_q: float               # potential at the first argument
    v_u: float               # potential at the second argument


class TermTables:
    """Bonded term index lists with per-term parameters, canonically sorted."""

    def __init__(self, topology, forcefield):
        nb = len(topology.bonds)
        self.bond_idx = topology.bonds
        self.bond_k = np.full(nb, forcefield.bond.k if nb else 0.0)
        self.bond_r0 = np.full(nb, forcefield.bond.r0 if nb else 0.0)
        self.bond_zero = np.zeros(nb)
        self.bond_code = np.full(nb, kernels.PAIR_BOND, np.int64)

        na = len(topology.angles)
        self.angle_idx = topology.angles
        self.angle_k = np.full(na, forcefield.angle.k if na else 0.0)
        self.angle_cos0 = np.full(na, forcefield.angle.cos_theta0 if na else 0.0)

        # Proper then improper torsions share one table; both are evaluated
        # by the same four-body machinery.
        blocks = []
        ks = []
        cs = []
        if len(topology.dihedrals):
            blocks.append(topology.dihedrals)
            ks.append(np.full(len(topology.dihedrals), forcefield.torsion.k))
            cs.extend([forcefield.torsion.coeffs] * len(topology.dihedrals))
        if len(topology.impropers):
            par = forcefield.improper if forcefield.improper is not None \
                else forcefield.torsion
            blocks.append(topology.impropers)
            ks.append(np.full(len(topology.impropers), par.k))
            cs.extend([par.coeffs] * len(topology.impropers))
        if blocks:
            self.tors_idx = np.concatenate(blocks, axis=0)
            self.tors_k = np.concatenate(ks)
            width = max(len(c) for c in cs)
            self.tors_coeffs = np.zeros((len(cs), width))
            for t, c in enumerate(cs):
                self.tors_coeffs[t, :len(c)] = c
        else:
            self.tors_idx = np.zeros((0, 4), np.int64)
            self.tors_k = np.zeros(0)
            self.tors_coeffs = np.zeros((0, 1))


def brute_pairs(molecule):
    """All i<j pairs except intramolecular ones, in canonical row order."""
    molecule = np.asarray(molecule, np.int64)
    iu, ju = np.triu_indices(len(molecule), k=1)
    keep = ((molecule[iu] == -1) | (molecule[ju] == -1)
            | (molecule[iu] != molecule[ju]))
    return np.stack([iu[keep], ju[keep]], axis=1)


def anchor_shifts(q, idx, box):
    """Periodic shifts putting each term's atoms next to its first atom."""
    rows = q[idx]
    delta = rows - rows[:, :1, :]
    return minimum_image(delta, box) - delta


class _Linearization:
    """Views and parameters frozen for one Newton iterate."""

    __slots__ = ("mode", "pair_idx", "pair_views", "pair_code", "pair_params",
                 "bond_idx", "bond_views", "bond_code", "bond_params", "n")


class SerialEngine:
    """Direct-sum engine over explicit pair and bonded term lists."""

    def __init__(self, system, forcefield, topology=None, box=None):
        self.box = box if box is not None else Box()
        self.forcefield = forcefield
        self.system = system
        self.topology = topology if topology is not None \
            else derive_topology(system.molecule)
        validate_forcefield(forcefield, self.topology)
        if self.box.periodic:
            if forcefield.lj and forcefield.r_cut is None:
                raise ConfigurationError(
                    "nonbonded interactions in a periodic box need a cutoff")
            if forcefield.r_cut is not None:
                self.box.require_cutoff_fits(forcefield.r_cut)
        self.tables = TermTables(self.topology, forcefield)
        self._set_pair_list(self._initial_pairs())
        self.n = system.n
        self.mass = system.mass
        self.max_step_travel = None
        self.counts = {"assemblies": 0, "pair": 0, "bond": 0,
                       "angle": 0, "torsion": 0}
        self._pair_shift = None
        self._bond_shift = None
        self._angle_shift = None
        self._tors_shift = None

    def _initial_pairs(self):
        if self.forcefield.lj:
            return brute_pairs(self.system.molecule)
        return np.zeros((0, 2), np.int64)

    def _set_pair_list(self, pair_idx):
        """Install a canonical (i<j, row-sorted) nonbonded pair list."""
        ff = self.forcefield
        self.pair_idx = pair_idx
        si = self.system.species[pair_idx[:, 0]]
        sj = self.system.species[pair_idx[:, 1]]
        m = len(pair_idx)
        if ff.r_cut is None:
            self.pair_code = np.full(m, kernels.PAIR_LJ, np.int64)
            p2 = np.zeros(m)
            p3 = np.zeros(m)
        else:
            self.pair_code = np.full(m, kernels.PAIR_LJ_SWITCHED, np.int64)
            p2 = np.full(m, ff.r_m)
            p3 = np.full(m, ff.r_cut)
        self.pair_params = (ff.sigma_ij[si, sj], ff.epsilon_ij[si, sj], p2, p3)

    # -- per-step hooks ----------------------------------------------------

    def begin_step(self, q, p, tau):
        """Freeze periodic image choices for the whole step.

        Shifts are taken from the current positions and reused for every
        trial geometry inside the step, so a term sees one consistent
        periodic copy while the step's nonlinear system is solved.
        """
        if not self.box.periodic:
            return
        t = self.tables
        i, j = self.pair_idx[:, 0], self.pair_idx[:, 1]
        delta = q[j] - q[i]
        self._pair_shift = minimum_image(delta, self.box) - delta
        if len(t.bond_idx):
            self._bond_shift = anchor_shifts(q, t.bond_idx, self.box)
        if len(t.angle_idx):
            self._angle_shift = anchor_shifts(q, t.angle_idx, self.box)
        if len(t.tors_idx):
            self._tors_shift = anchor_shifts(q, t.tors_idx, self.box)

    def end_step(self, q_prev, q_next):
        return

    # -- gathers -----------------------------------------------------------

    def _pair_views(self, q, u):
        i, j = self.pair_idx[:, 0], self.pair_idx[:, 1]
        xi, xj = q[i], q[j]
        ui, uj = u[i], u[j]
        if self._pair_shift is not None:
            xj = xj + self._pair_shift
            uj = uj + self._pair_shift
        return xi, xj, ui, uj

    def _term_views(self, x, idx, shift):
        rows = x[idx]
        if shift is not None:
            rows = rows + shift
        return rows

    def _active(self, xi, xj, ui, uj):
        if self.forcefield.r_cut is None:
            return slice(None), len(xi)
        mask = kernels.pair_active_kernel(xi, xj, ui, uj, self.forcefield.r_cut)
        act = np.flatnonzero(mask)
        return act, len(act)

    def _scatter(self, idx_parts, val_parts):
        idx = np.concatenate(idx_parts) if idx_parts else np.zeros(0, np.int64)
        val = np.concatenate(val_parts) if val_parts else np.zeros((0, 3))
        out = np.empty((self.n, 3))
        for c in range(3):
            out[:, c] = np.bincount(idx, weights=val[:, c], minlength=self.n)
        return out

    # -- assemblies ----------------------------------------------------------

    def dg_assemble(self, q, u, variant="symmetric"):
        """Discrete gradient of the total potential between q and u."""
        code = variant_code(variant)
        t = self.tables
        idx_parts, val_parts = [], []
        v_q = 0.0
        v_u = 0.0
        self.counts["assemblies"] += 1

        if len(t.bond_idx):
            xb = self._term_views(q, t.bond_idx, self._bond_shift)
            ub = self._term_views(u, t.bond_idx, self._bond_shift)
            gj, vq_a, vu_a = kernels.pair_dg_kernel(
                xb[:, 0], xb[:, 1], ub[:, 0], ub[:, 1],
                t.bond_code, t.bond_k, t.bond_r0, t.bond_zero, t.bond_zero)
            idx_parts += [t.bond_idx[:, 0], t.bond_idx[:, 1]]
            val_parts += [-gj, gj]
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["bond"] += len(t.bond_idx)

        if len(t.angle_idx):
            xa = self._term_views(q, t.angle_idx, self._angle_shift)
            ua = self._term_views(u, t.angle_idx, self._angle_shift)
            g, vq_a, vu_a = kernels.angle_dg_kernel(
                xa, ua, t.angle_k, t.angle_cos0, code)
            for s in range(3):
                idx_parts.append(t.angle_idx[:, s])
                val_parts.append(g[:, s])
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["angle"] += len(t.angle_idx)

        if len(t.tors_idx):
            xt = self._term_views(q, t.tors_idx, self._tors_shift)
            ut = self._term_views(u, t.tors_idx, self._tors_shift)
            g, vq_a, vu_a, ok = kernels.dihedral_dg_kernel(
                xt, ut, t.tors_k, t.tors_coeffs, code)
            if np.any(ok == 0.0):
                raise GeometryError(
                    "collinear torsion geometry; angle undefined")
            for s in range(4):
                idx_parts.append(t.tors_idx[:, s])
                val_parts.append(g[:, s])
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["torsion"] += len(t.tors_idx)

        if len(self.pair_idx):
            xi, xj, ui, uj = self._pair_views(q, u)
            act, n_act = self._active(xi, xj, ui, uj)
            p0, p1, p2, p3 = self.pair_params
            gj, vq_a, vu_a = kernels.pair_dg_kernel(
                xi[act], xj[act], ui[act], uj[act],
                self.pair_code[act], p0[act], p1[act], p2[act], p3[act])
            idx_parts += [self.pair_idx[act, 0], self.pair_idx[act, 1]]
            val_parts += [-gj, gj]
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["pair"] += n_act

        return DGEvaluation(self._scatter(idx_parts, val_parts), v_q, v_u)

    def force_assemble(self, q):
        """Potential and its gradient at one geometry."""
        t = self.tables
        idx_parts, val_parts = [], []
        v = 0.0
        self.counts["assemblies"] += 1

        if len(t.bond_idx):
            xb = self._term_views(q, t.bond_idx, self._bond_shift)
            fj, v_a = kernels.pair_force_kernel(
                xb[:, 0], xb[:, 1],
                t.bond_code, t.bond_k, t.bond_r0, t.bond_zero, t.bond_zero)
            idx_parts += [t.bond_idx[:, 0], t.bond_idx[:, 1]]
            val_parts += [-fj, fj]
            v += float(np.sum(v_a))
            self.counts["bond"] += len(t.bond_idx)

        if len(t.angle_idx):
            xa = self._term_views(q, t.angle_idx, self._angle_shift)
            g, v_a = kernels.angle_force_kernel(xa, t.angle_k, t.angle_cos0)
            for s in range(3):
                idx_parts.append(t.angle_idx[:, s])
                val_parts.append(g[:, s])
            v += float(np.sum(v_a))
            self.counts["angle"] += len(t.angle_idx)

        if len(t.tors_idx):
            xt = self._term_views(q, t.tors_idx, self._tors_shift)
            g, v_a, ok = kernels.dihedral_force_kernel(
                xt, t.tors_k, t.tors_coeffs)
            if np.any(ok == 0.0):
                raise GeometryError(
                    "collinear torsion geometry; angle undefined")
            for s in range(4):
                idx_parts.append(t.tors_idx[:, s])
                val_parts.append(g[:, s])
            v += float(np.sum(v_a))
            self.counts["torsion"] += len(t.tors_idx)

        if len(self.pair_idx):
            xi, xj, _, _ = self._pair_views(q, q)
            act, n_act = self._active(xi, xj, xi, xj)
            p0, p1, p2, p3 = self.pair_params
            fj, v_a = kernels.pair_force_kernel(
                xi[act], xj[act],
                self.pair_code[act], p0[act], p1[act], p2[act], p3[act])
            idx_parts += [self.pair_idx[act, 0], self.pair_idx[act, 1]]
            val_parts += [-fj, fj]
            v += float(np.sum(v_a))
            self.counts["pair"] += n_act

        return ForceEvaluation(self._scatter(idx_parts, val_parts), v)

    def potential(self, q):
        self.begin_step(q, None, 0.0)
        return self.force_assemble(q).potential

    # -- linearizations ------------------------------------------------------

    def linearize_dg(self, q, u, mode):
        """Freeze the operator data for one Newton iterate.

        "full" is the exact directional derivative of the assembled discrete
        gradient and is available when only two-body terms are present;
        "simplified" is the two-body part of the Hessian at the geometric
        midpoint, which is what the correction equation needs to leading
        order.
        """
        t = self.tables
        if mode == "full" and (len(t.angle_idx) or len(t.tors_idx)):
            raise ConfigurationError(
                "full linearisation covers two-body terms only; "
                "use the simplified mode for angle/torsion systems")
        lin = _Linearization()
        lin.mode = mode
        lin.n = self.n
        if len(t.bond_idx):
            xb = self._term_views(q, t.bond_idx, self._bond_shift)
            ub = self._term_views(u, t.bond_idx, self._bond_shift)
            lin.bond_idx = t.bond_idx
            lin.bond_code = t.bond_code
            lin.bond_params = (t.bond_k, t.bond_r0, t.bond_zero, t.bond_zero)
            if mode == "full":
                lin.bond_views = (xb[:, 0], xb[:, 1], ub[:, 0], ub[:, 1])
            else:
                mid = 0.5 * (xb + ub)
                lin.bond_views = (mid[:, 0], mid[:, 1])
        else:
            lin.bond_idx = None
        if len(self.pair_idx):
            xi, xj, ui, uj = self._pair_views(q, u)
            act, _ = self._active(xi, xj, ui, uj)
            p0, p1, p2, p3 = self.pair_params
            lin.pair_idx = self.pair_idx[act]
            lin.pair_code = self.pair_code[act]
            lin.pair_params = (p0[act], p1[act], p2[act], p3[act])
            if mode == "full":
                lin.pair_views = (xi[act], xj[act], ui[act], uj[act])
            else:
                lin.pair_views = (0.5 * (xi[act] + ui[act]),
                                  0.5 * (xj[act] + uj[act]))
        else:
            lin.pair_idx = None
        return lin

    def linearize_force(self, x):
        """Two-body Hessian data at one geometry (midpoint-rule solves)."""
        t = self.tables
        lin = _Linearization()
        lin.mode = "simplified"
        lin.n = self.n
        if len(t.bond_idx):
            xb = self._term_views(x, t.bond_idx, self._bond_shift)
            lin.bond_idx = t.bond_idx
            lin.bond_code = t.bond_code
            lin.bond_params = (t.bond_k, t.bond_r0, t.bond_zero, t.bond_zero)
            lin.bond_views = (xb[:, 0], xb[:, 1])
        else:
            lin.bond_idx = None
        if len(self.pair_idx):
            xi, xj, _, _ = self._pair_views(x, x)
            act, _ = self._active(xi, xj, xi, xj)
            p0, p1, p2, p3 = self.pair_params
            lin.pair_idx = self.pair_idx[act]
            lin.pair_code = self.pair_code[act]
            lin.pair_params = (p0[act], p1[act], p2[act], p3[act])
            lin.pair_views = (xi[act], xj[act])
        else:
            lin.pair_idx = None
        return lin

    def apply_linearized(self, lin, v):
        """Directional derivative of the assembled gradient map along v."""
        idx_parts, val_parts = [], []
        if lin.bond_idx is not None:
            vi = v[lin.bond_idx[:, 0]]
            vj = v[lin.bond_idx[:, 1]]
            if lin.mode == "full":
                xi, xj, ui, uj = lin.bond_views
                h = kernels.pair_dgjac_kernel(xi, xj, ui, uj, vi, vj,
                                              lin.bond_code, *lin.bond_params)
            else:
                xi, xj = lin.bond_views
                h = kernels.pair_hessvec_kernel(xi, xj, vi, vj,
                                                lin.bond_code, *lin.bond_params)
            idx_parts += [lin.bond_idx[:, 0], lin.bond_idx[:, 1]]
            val_parts += [-h, h]
        if lin.pair_idx is not None:
            vi = v[lin.pair_idx[:, 0]]
            vj = v[lin.pair_idx[:, 1]]
            if lin.mode == "full":
                xi, xj, ui, uj = lin.pair_views
                h = kernels.pair_dgjac_kernel(xi, xj, ui, uj, vi, vj,
                                              lin.pair_code, *lin.pair_params)
            else:
                xi, xj = lin.pair_views
                h = kernels.pair_hessvec_kernel(xi, xj, vi, vj,
                                                lin.pair_code, *lin.pair_params)
            idx_parts += [lin.pair_idx[:, 0], lin.pair_idx[:, 1]]
            val_parts += [-h, h]
        return self._scatter(idx_parts, val_parts)
