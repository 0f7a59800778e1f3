"""Linked cells, rank decomposition and message-based parallel assembly.

Neighbor search bins particles into cells of edge >= r_cut.  Implicit steps
evaluate terms at the current and at a trial geometry, so a pair can matter
before it is close at the current positions; candidate generation therefore
sweeps a border of up to two cells, and the per-step pair list keeps every
pair within r_cut + 2*travel, where travel is the per-step displacement
bound enforced in `end_step`.

The rank-decomposed engine reproduces the single-rank cell engine bit for
bit.  Three things make that work: every kept pair is evaluated from the
same periodic image with the same float expressions on every layout, each
term is evaluated by exactly one rank (the owner of its lowest-global-id
atom), and per-term contributions are merged into the canonical class-major
order documented in `engine` before any reduction happens.  Newton/CG state
stays with the driver; assembly is what is distributed.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import kernels
from .core import Box, ConfigurationError, GeometryError, wrap_positions
from .dgrad import variant_code
from .engine import DGEvaluation, ForceEvaluation, SerialEngine

GHOST_WIDTH = 2

# One particle on the wire.  Packed little-endian, 92 bytes; molecule is a
# signed id (-1 for free atoms) shipped through its two's-complement bits.
WIRE_RECORD = np.dtype([
    ("gid", "<u8"),
    ("molecule", "<u8"),
    ("species", "<u4"),
    ("q", "<f8", (3,)),
    ("q_trial", "<f8", (3,)),
    ("p", "<f8", (3,)),
], align=False)


def encode_records(gid, molecule, species, q, q_trial, p):
    """Pack one message's particle records, prefixed by a u32 record count.

    Records must be sorted by global id; receivers rely on it.
    """
    gid = np.ascontiguousarray(gid, np.int64)
    if len(gid) > 1 and np.any(np.diff(gid) <= 0):
        raise ConfigurationError("message records must be sorted by global id")
    rec = np.zeros(len(gid), WIRE_RECORD)
    rec["gid"] = gid.view(np.uint64)
    rec["molecule"] = np.ascontiguousarray(molecule, np.int64).view(np.uint64)
    rec["species"] = np.asarray(species, np.int64).astype(np.uint32)
    rec["q"] = q
    rec["q_trial"] = q_trial
    rec["p"] = p
    return np.uint32(len(gid)).tobytes() + rec.tobytes()


def decode_records(payload):
    """Inverse of `encode_records`; floats round-trip bit-for-bit."""
    count = int(np.frombuffer(payload[:4], "<u4")[0])
    rec = np.frombuffer(payload[4:], WIRE_RECORD, count=count)
    return {
        "gid": rec["gid"].view(np.int64),
        "molecule": rec["molecule"].view(np.int64),
        "species": rec["species"].astype(np.int64),
        "q": rec["q"],
        "q_trial": rec["q_trial"],
        "p": rec["p"],
    }


class SimulatedFabric:
    """In-process reliable transport with deterministic delivery.

    Messages are handed to a receiver grouped by phase and sorted by sender
    rank, so the payload sequence a rank observes is a pure function of what
    was sent, never of posting order.  Delivery is reliable by contract;
    there is no loss or timeout path, and a lost message in a real transport
    must abort the run.
    """

    def __init__(self):
        self._queues = {}
        self.messages = 0
        self.bytes_moved = 0

    def post(self, phase, src, dst, payload):
        self._queues.setdefault((phase, dst), []).append((src, payload))
        self.messages += 1
        self.bytes_moved += len(payload)

    def collect(self, phase, dst):
        entries = self._queues.pop((phase, dst), [])
        entries.sort(key=lambda e: e[0])
        return entries

    def idle(self):
        return not self._queues


@dataclass
class DomainMap:
    """Cell-aligned partition of a periodic box into a rank grid."""

    box: Box
    r_cut: float
    n_cells: np.ndarray
    edge: np.ndarray
    rank_grid: np.ndarray
    cells_per_rank: np.ndarray

    @property
    def rank_count(self):
        return int(np.prod(self.rank_grid))

    def rank_coords(self, ranks):
        ranks = np.asarray(ranks, np.int64)
        py, pz = int(self.rank_grid[1]), int(self.rank_grid[2])
        return np.stack([ranks // (py * pz), (ranks // pz) % py, ranks % pz],
                        axis=-1)

    def rank_index(self, coord):
        py, pz = int(self.rank_grid[1]), int(self.rank_grid[2])
        return (int(coord[0]) * py + int(coord[1])) * pz + int(coord[2])

    def cell_lo(self, rank):
        return self.rank_coords(rank) * self.cells_per_rank

    def bounds(self, rank):
        lo = self.cell_lo(rank)
        return lo * self.edge, (lo + self.cells_per_rank) * self.edge

    def position_cells(self, q):
        w = wrap_positions(q, self.box)
        c = np.floor(w / self.edge).astype(np.int64)
        np.clip(c, 0, self.n_cells - 1, out=c)
        return c

    def owner_of_cells(self, cells):
        rc = cells // self.cells_per_rank
        py, pz = int(self.rank_grid[1]), int(self.rank_grid[2])
        return (rc[:, 0] * py + rc[:, 1]) * pz + rc[:, 2]

    def owner_of_positions(self, q):
        return self.owner_of_cells(self.position_cells(q))


def decompose(box, r_cut, rank_count):
    """Split a periodic box into a near-cubic, cell-aligned rank grid.

    Admissible factorizations of `rank_count` divide the per-axis cell
    counts exactly and leave each split axis at least two cells per rank,
    so a one-hop exchange per direction fills the two-cell border.  The
    factorization with the most balanced subdomain edges wins; ties break
    toward splitting x before y before z.
    """
    if not box.periodic:
        raise ConfigurationError("decomposition requires a periodic box")
    if rank_count < 1:
        raise ConfigurationError("rank count must be positive")
    n_cells = np.floor(box.lengths / r_cut).astype(np.int64)
    if np.any(n_cells < 1):
        raise ConfigurationError(
            f"box {box.lengths} is thinner than the cutoff {r_cut}")
    edge = box.lengths / n_cells

    def admissible(p):
        for ax in range(3):
            if n_cells[ax] % p[ax]:
                return False
            if p[ax] > 1 and n_cells[ax] // p[ax] < GHOST_WIDTH:
                return False
        return True

    best = None
    for px in range(1, rank_count + 1):
        if rank_count % px:
            continue
        rest = rank_count // px
        for py in range(1, rest + 1):
            if rest % py:
                continue
            p = (px, py, rest // py)
            if not admissible(p):
                continue
            ext = box.lengths / np.array(p, float)
            key = (float(ext.max() / ext.min()), tuple(-v for v in p))
            if best is None or key < best[0]:
                best = (key, p)
    if best is None:
        raise ConfigurationError(
            f"cannot split {tuple(int(c) for c in n_cells)} cells across "
            f"{rank_count} ranks on cell boundaries")
    grid = np.array(best[1], np.int64)
    return DomainMap(box, float(r_cut), n_cells, edge, grid, n_cells // grid)


# -- cell sweeps -------------------------------------------------------------


def _half_offsets(width):
    rng = range(-width, width + 1)
    offs = [(x, y, z) for x in rng for y in rng for z in rng
            if (x, y, z) > (0, 0, 0)]
    return np.array(offs, np.int64)


@njit(cache=True)
def _sweep_kernel(order, start, nx, ny, nz, wrapx, wrapy, wrapz,
                  lx, ly, lz, offs, pos, gid, molecule, keep, rlist2,
                  out_i, out_j, write):
    """Emit pairs of rows co-located within the swept cell neighbourhood.

    Rows live in a cell window of nx*ny*nz cells; wrapped axes fold offsets
    modulo the axis and carry the matching +-L image shift, so distances are
    always between one consistent periodic image pair.  A pair is emitted
    when some swept image lies within sqrt(rlist2), as (min gid, max gid),
    and only when the lower-gid row has its keep flag set.
    """
    count = 0
    for cx in range(nx):
        for cy in range(ny):
            for cz in range(nz):
                c = (cx * ny + cy) * nz + cz
                a0 = start[c]
                a1 = start[c + 1]
                if a0 == a1:
                    continue
                for ai in range(a0, a1):
                    a = order[ai]
                    xa = pos[a, 0]
                    ya = pos[a, 1]
                    za = pos[a, 2]
                    for bi in range(ai + 1, a1):
                        b = order[bi]
                        dx = pos[b, 0] - xa
                        dy = pos[b, 1] - ya
                        dz = pos[b, 2] - za
                        if dx * dx + dy * dy + dz * dz > rlist2:
                            continue
                        ga = gid[a]
                        gb = gid[b]
                        if ga == gb:
                            continue
                        if molecule[a] == molecule[b] and molecule[a] >= 0:
                            continue
                        if ga < gb:
                            if keep[a] == 0:
                                continue
                            glo, ghi = ga, gb
                        else:
                            if keep[b] == 0:
                                continue
                            glo, ghi = gb, ga
                        if write:
                            out_i[count] = glo
                            out_j[count] = ghi
                        count += 1
                for k in range(offs.shape[0]):
                    txr = cx + offs[k, 0]
                    tx = txr % nx
                    kx = (txr - tx) // nx
                    if kx != 0 and wrapx == 0:
                        continue
                    tyr = cy + offs[k, 1]
                    ty = tyr % ny
                    ky = (tyr - ty) // ny
                    if ky != 0 and wrapy == 0:
                        continue
                    tzr = cz + offs[k, 2]
                    tz = tzr % nz
                    kz = (tzr - tz) // nz
                    if kz != 0 and wrapz == 0:
                        continue
                    t = (tx * ny + ty) * nz + tz
                    if t == c:
                        continue
                    b0 = start[t]
                    b1 = start[t + 1]
                    if b0 == b1:
                        continue
                    sx = lx * kx
                    sy = ly * ky
                    sz = lz * kz
                    for ai in range(a0, a1):
                        a = order[ai]
                        xa = pos[a, 0]
                        ya = pos[a, 1]
                        za = pos[a, 2]
                        ga = gid[a]
                        ma = molecule[a]
                        ka = keep[a]
                        for bi in range(b0, b1):
                            b = order[bi]
                            dx = (pos[b, 0] + sx) - xa
                            dy = (pos[b, 1] + sy) - ya
                            dz = (pos[b, 2] + sz) - za
                            if dx * dx + dy * dy + dz * dz > rlist2:
                                continue
                            gb = gid[b]
                            if ga == gb:
                                continue
                            if ma == molecule[b] and ma >= 0:
                                continue
                            if ga < gb:
                                if ka == 0:
                                    continue
                                glo, ghi = ga, gb
                            else:
                                if keep[b] == 0:
                                    continue
                                glo, ghi = gb, ga
                            if write:
                                out_i[count] = glo
                                out_j[count] = ghi
                            count += 1
    return count


def _run_sweep(coords, dims, wrap, lengths, offs, pos, gid, molecule, keep,
               rlist2):
    dims = np.asarray(dims, np.int64)
    lin = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    order = np.argsort(lin, kind="stable").astype(np.int64)
    start = np.zeros(int(dims.prod()) + 1, np.int64)
    start[1:] = np.cumsum(np.bincount(lin, minlength=int(dims.prod())))
    args = (order, start, int(dims[0]), int(dims[1]), int(dims[2]),
            int(wrap[0]), int(wrap[1]), int(wrap[2]),
            float(lengths[0]), float(lengths[1]), float(lengths[2]),
            offs, pos, gid, molecule, keep, float(rlist2))
    none = np.empty(0, np.int64)
    m = _sweep_kernel(*args, none, none, 0)
    out_i = np.empty(m, np.int64)
    out_j = np.empty(m, np.int64)
    _sweep_kernel(*args, out_i, out_j, 1)
    return out_i, out_j


def _canonical_pairs(i, j):
    """Sort (i, j) rows lexicographically and drop duplicates."""
    if len(i) == 0:
        return np.zeros((0, 2), np.int64)
    perm = np.lexsort((j, i))
    i = i[perm]
    j = j[perm]
    fresh = np.ones(len(i), bool)
    fresh[1:] = (i[1:] != i[:-1]) | (j[1:] != j[:-1])
    return np.stack([i[fresh], j[fresh]], axis=1)


class CellGrid:
    """Cell binning of one particle set, current and trial positions.

    Every particle falls in exactly one cell per position set; trial
    positions get their own binning so candidate generation can see pairs
    that only become close at the trial geometry.
    """

    def __init__(self, lo, edge, n_cells, wrap, q, q_trial, coords,
                 coords_trial):
        self.lo = lo
        self.edge = edge
        self.n_cells = n_cells
        self.wrap = wrap
        self.q = q
        self.q_trial = q_trial
        self.coords = coords
        self.coords_trial = coords_trial

    @property
    def n(self):
        return len(self.q)

    def particles_in(self, cell):
        cell = np.asarray(cell, np.int64)
        return np.flatnonzero(np.all(self.coords == cell, axis=1))


def build_cells(q, lo, hi, r_cut, q_trial=None, wrap=None):
    """Bin particles into cells covering [lo, hi) with edge >= r_cut.

    Per axis the cell count is floor(extent / r_cut), so the edge is the
    smallest length >= r_cut that tiles the extent exactly.  Wrapped axes
    fold positions periodically before binning; on open axes positions
    outside the bounds clip into the boundary cells.
    """
    q = np.atleast_2d(np.asarray(q, float))
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    if r_cut <= 0:
        raise ConfigurationError("cutoff must be positive")
    extent = hi - lo
    n_cells = np.floor(extent / r_cut).astype(np.int64)
    if np.any(n_cells < 1):
        raise ConfigurationError(
            f"bounds of extent {extent} are thinner than one cell of {r_cut}")
    edge = extent / n_cells
    if wrap is None:
        wrap = np.zeros(3, bool)
    else:
        wrap = np.asarray(wrap, bool) * np.ones(3, bool)

    def bin_points(x):
        rel = x - lo
        folded = np.where(wrap, rel - np.floor(rel / extent) * extent, rel)
        c = np.floor(folded / edge).astype(np.int64)
        np.clip(c, 0, n_cells - 1, out=c)
        return c

    coords = bin_points(q)
    if q_trial is None:
        return CellGrid(lo, edge, n_cells, wrap, q, q, coords, coords)
    q_trial = np.atleast_2d(np.asarray(q_trial, float))
    return CellGrid(lo, edge, n_cells, wrap, q, q_trial, coords,
                    bin_points(q_trial))


def candidate_pairs(grid, halo_width):
    """Unordered candidate pairs from a sweep of `halo_width` cells.

    Pairs are discovered in both the current and the trial binning, so any
    pair within r_cut at either geometry is produced: wherever the two
    particles sit at that geometry, they occupy adjacent cells of its
    binning.  Candidates are a superset of the interacting pairs; each pair
    appears at most once, rows sorted ascending.
    """
    if halo_width not in (1, 2):
        raise ConfigurationError("halo width must be 1 or 2")
    offs = _half_offsets(halo_width)
    n = grid.n
    gid = np.arange(n, dtype=np.int64)
    molecule = np.full(n, -1, np.int64)
    keep = np.ones(n, np.uint8)
    extent = grid.edge * grid.n_cells

    def one(pos, coords):
        rel = np.asarray(pos, float) - grid.lo
        folded = np.where(grid.wrap, rel - np.floor(rel / extent) * extent,
                          rel)
        return _run_sweep(coords, grid.n_cells, grid.wrap.astype(np.int64),
                          extent, offs, np.ascontiguousarray(folded), gid,
                          molecule, keep, np.inf)

    i, j = one(grid.q, grid.coords)
    if grid.q_trial is not grid.q:
        it, jt = one(grid.q_trial, grid.coords_trial)
        i = np.concatenate([i, it])
        j = np.concatenate([j, jt])
    return _canonical_pairs(i, j)


# -- ghost exchange, reattachment, migration ---------------------------------


def _dedupe_pool(pool):
    """Drop repeated global ids, keeping each first (owned-first) copy."""
    gids = pool["gid"]
    if len(gids) < 2:
        return pool
    _, first = np.unique(gids, return_index=True)
    if len(first) == len(gids):
        return pool
    rows = np.sort(first)
    return {k: v[rows] for k, v in pool.items()}


def exchange_ghosts(owned, dmap, fabric, width=GHOST_WIDTH):
    """Three-phase halo exchange; returns each rank's ghost records.

    `owned` is a per-rank dict of index-aligned arrays (gid, molecule,
    species, q, q_trial, p).  Each axis phase sends everything a rank holds
    so far (own particles plus ghosts from earlier phases) that lies within
    `width` cells of the face, so corner regions arrive transitively.
    Selection distances are slab-relative, modulo the periodic cell count.
    Records travel sorted by global id; duplicate arrivals are bit-identical
    copies of the owner's record and collapse to one.  Returned ghost
    arrays are sorted by global id.
    """
    ranks = dmap.rank_count
    pools = [{k: np.asarray(v) for k, v in owned[r].items()}
             for r in range(ranks)]
    n_own = [len(owned[r]["gid"]) for r in range(ranks)]

    for axis in range(3):
        if int(dmap.rank_grid[axis]) == 1:
            continue
        n_glob = int(dmap.n_cells[axis])
        n_loc = int(dmap.cells_per_rank[axis])
        for direction in (-1, 1):
            phase = ("ghost", axis, direction)
            for r in range(ranks):
                pool = pools[r]
                cells = dmap.position_cells(pool["q"])[:, axis]
                d = (cells - int(dmap.cell_lo(r)[axis])) % n_glob
                if direction < 0:
                    rows = np.flatnonzero(d < width)
                else:
                    rows = np.flatnonzero(d >= n_loc - width)
                coord = dmap.rank_coords(r).copy()
                coord[axis] = (coord[axis] + direction) % int(
                    dmap.rank_grid[axis])
                dst = dmap.rank_index(coord)
                if dst == r:
                    continue
                rows = rows[np.argsort(pool["gid"][rows], kind="stable")]
                fabric.post(phase, r, dst, encode_records(
                    pool["gid"][rows], pool["molecule"][rows],
                    pool["species"][rows], pool["q"][rows],
                    pool["q_trial"][rows], pool["p"][rows]))
            for r in range(ranks):
                for src, payload in fabric.collect(phase, r):
                    rec = decode_records(payload)
                    pool = pools[r]
                    for key in pool:
                        pool[key] = np.concatenate([pool[key], rec[key]])
                pools[r] = _dedupe_pool(pools[r])

    ghosts = []
    for r in range(ranks):
        tail = {k: v[n_own[r]:] for k, v in pools[r].items()}
        order = np.argsort(tail["gid"], kind="stable")
        ghosts.append({k: v[order] for k, v in tail.items()})
    return ghosts


def reattach_molecules(tables, owner, rank, local_gids):
    """Bind this rank's bonded terms to rows of its owned+ghost storage.

    A term belongs to the rank owning its lowest-global-id atom; that rank
    must hold every atom of the term locally, otherwise the ghost border is
    too thin and the offending term is named.  The binding carries no
    global state, so detaching is simply dropping it.
    """
    sorter = np.argsort(local_gids, kind="stable")
    sorted_gids = local_gids[sorter]

    def resolve(idx, label):
        rows = np.flatnonzero(owner[idx.min(axis=1)] == rank)
        flat = idx[rows].ravel()
        pos = np.searchsorted(sorted_gids, flat)
        bad = (pos >= len(sorted_gids)) | (sorted_gids[np.minimum(
            pos, max(len(sorted_gids) - 1, 0))] != flat)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            term = tuple(int(v) for v in idx[rows[k // idx.shape[1]]])
            raise ConfigurationError(
                f"{label} term {term} is unresolvable on rank {rank}: atom "
                f"{int(flat[k])} is outside the owned+ghost region")
        return rows, sorter[pos].reshape(idx[rows].shape)

    out = {}
    for label, idx in (("bond", tables.bond_idx),
                       ("angle", tables.angle_idx),
                       ("torsion", tables.tors_idx)):
        idx = np.asarray(idx, np.int64)
        if len(idx):
            out[label] = resolve(idx, label)
        else:
            out[label] = (np.zeros(0, np.int64),
                          np.zeros((0, idx.shape[1]), np.int64))
    return out


def migrate(owner, q_next, dmap, system=None, fabric=None):
    """Reassign ownership after a step, with neighbor and census checks.

    A particle may cross at most one subdomain per step; anything further
    means the step size violated the travel bound.  With a fabric, moved
    particles' records are shipped to their new owners and the rebuilt
    per-rank census is checked against the new assignment, so no particle
    is lost or duplicated.
    """
    new_owner = dmap.owner_of_positions(q_next)
    moved = np.flatnonzero(new_owner != owner)
    if len(moved):
        oc = dmap.rank_coords(owner[moved])
        nc = dmap.rank_coords(new_owner[moved])
        d = np.abs(oc - nc)
        d = np.minimum(d, dmap.rank_grid - d)
        if np.any(d > 1):
            worst = int(moved[int(np.argmax(d.max(axis=1)))])
            raise GeometryError(
                f"particle {worst} crossed more than one subdomain in a "
                "step; the per-step travel bound was violated")
    if fabric is not None and len(moved):
        mol = system.molecule if system is not None \
            else np.full(len(q_next), -1, np.int64)
        spc = system.species if system is not None \
            else np.zeros(len(q_next), np.int64)
        transfers = {}
        for a in moved:
            key = (int(owner[a]), int(new_owner[a]))
            transfers.setdefault(key, []).append(int(a))
        for (src, dst), atoms in sorted(transfers.items()):
            rows = np.array(sorted(atoms), np.int64)
            fabric.post(("migrate",), src, dst, encode_records(
                rows, mol[rows], spc[rows], q_next[rows], q_next[rows],
                np.zeros((len(rows), 3))))
        for r in range(dmap.rank_count):
            arrived = [decode_records(payload)["gid"]
                       for _, payload in fabric.collect(("migrate",), r)]
            stayed = np.flatnonzero((owner == r) & (new_owner == r))
            rebuilt = np.sort(np.concatenate([stayed] + arrived)) \
                if arrived else stayed
            if not np.array_equal(rebuilt, np.flatnonzero(new_owner == r)):
                raise RuntimeError(f"migration census mismatch on rank {r}")
    return new_owner


# -- engines -----------------------------------------------------------------


class CellEngine(SerialEngine):
    """Linked-cell engine for periodic systems with a switched cutoff.

    The nonbonded pair list is rebuilt every step as the canonical sorted
    list of pairs within r_cut + 2*travel of each other, so every pair that
    can interact anywhere in the step's implicit solve is present once the
    converged step obeys the travel bound (checked in `end_step`).
    """

    def __init__(self, system, forcefield, topology=None, box=None,
                 max_step_travel=None):
        if box is None or not box.periodic:
            raise ConfigurationError("cell engine requires a periodic box")
        if forcefield.r_cut is None:
            raise ConfigurationError("cell engine requires a cutoff")
        super().__init__(system, forcefield, topology=topology, box=box)
        r = forcefield.r_cut
        self.n_cells = np.floor(box.lengths / r).astype(np.int64)
        self.edge = box.lengths / self.n_cells
        # The two-cell border fixes the largest usable list radius at twice
        # the cell edge; the travel bound follows from it.
        cap = min(2.0 * r / 3.0, float(self.edge.min()) - 0.5 * r)
        if max_step_travel is None:
            max_step_travel = cap
        elif max_step_travel > cap or max_step_travel <= 0:
            raise ConfigurationError(
                f"per-step travel bound must lie in (0, {cap:.6g}]")
        self.max_step_travel = float(max_step_travel)
        self.r_list = r + 2.0 * self.max_step_travel
        self._offs = _half_offsets(GHOST_WIDTH)
        self._gid = np.arange(self.n, dtype=np.int64)
        self._keep_all = np.ones(self.n, np.uint8)

    def _initial_pairs(self):
        return np.zeros((0, 2), np.int64)

    def _find_pairs(self, q):
        w = np.ascontiguousarray(wrap_positions(q, self.box))
        c = np.floor(w / self.edge).astype(np.int64)
        np.clip(c, 0, self.n_cells - 1, out=c)
        i, j = _run_sweep(c, self.n_cells, np.ones(3, np.int64),
                          self.box.lengths, self._offs, w, self._gid,
                          self.system.molecule, self._keep_all,
                          self.r_list * self.r_list)
        return _canonical_pairs(i, j)

    def begin_step(self, q, p, tau):
        self._set_pair_list(self._find_pairs(q))
        super().begin_step(q, p, tau)

    def end_step(self, q_prev, q_next):
        if len(q_next) == 0:
            return
        travel = float(np.sqrt(((q_next - q_prev) ** 2).sum(axis=1)).max())
        if travel > self.max_step_travel:
            raise GeometryError(
                f"per-step displacement {travel:.6g} exceeds the travel "
                f"bound {self.max_step_travel:.6g}; reduce the step size")


class _StepPlan:
    """Per-step parallel bookkeeping: ghosts, bindings, term ownership."""

    __slots__ = ("owned", "ghost_gid", "loc_gid", "mol_loc", "lq", "lu",
                 "bind", "pair_rows", "pair_lidx")


class ParallelEngine(CellEngine):
    """Rank-decomposed cell engine over a simulated message fabric.

    Each rank owns the particles inside its subdomain and sees a two-cell
    ghost border whose trial positions are re-exchanged on every assembly,
    once per Newton iteration.  A term is evaluated exactly once, by the
    rank owning its lowest-global-id atom, and an eval counter per term
    backs that up.  Merged contributions reduce in the single-rank order,
    so the rank count never changes a trajectory.
    """

    def __init__(self, system, forcefield, ranks, topology=None, box=None,
                 max_step_travel=None, fabric=None):
        super().__init__(system, forcefield, topology=topology, box=box,
                         max_step_travel=max_step_travel)
        self.dmap = decompose(box, forcefield.r_cut, ranks)
        self.fabric = fabric if fabric is not None else SimulatedFabric()
        self.ranks = self.dmap.rank_count
        self._owner = self.dmap.owner_of_positions(system.q)
        t = self.tables
        self.term_audit = {
            "bond": np.zeros(len(t.bond_idx), np.int64),
            "angle": np.zeros(len(t.angle_idx), np.int64),
            "torsion": np.zeros(len(t.tors_idx), np.int64),
        }
        self._plan = None
        self._q0 = None

    # -- step planning -------------------------------------------------------

    def _rank_records(self, q, u, p):
        sysm = self.system
        out = []
        for r in range(self.ranks):
            ids = np.flatnonzero(self._owner == r)
            out.append({
                "gid": ids,
                "molecule": sysm.molecule[ids],
                "species": sysm.species[ids],
                "q": q[ids],
                "q_trial": u[ids],
                "p": p[ids] if p is not None else np.zeros((len(ids), 3)),
            })
        return out

    def _sweep_rank(self, plan, rank):
        """Pair sweep over this rank's cell window.

        Split axes use a slab window with a two-cell margin; every local
        row is placed at each congruent window slot, carrying the periodic
        image shift that slot stands for, so both wrap images of a border
        particle take part.  Unsplit axes stay global and wrap in-kernel.
        Only pairs whose lower-gid atom is owned here are kept.
        """
        dmap = self.dmap
        margin = GHOST_WIDTH
        gids = plan.loc_gid[rank]
        w = wrap_positions(plan.lq[rank], self.box)
        cells = np.floor(w / self.edge).astype(np.int64)
        np.clip(cells, 0, self.n_cells - 1, out=cells)
        lo = dmap.cell_lo(rank)
        dims = np.empty(3, np.int64)
        wrap = np.zeros(3, np.int64)
        per_axis = []
        for ax in range(3):
            n_glob = int(self.n_cells[ax])
            if int(dmap.rank_grid[ax]) == 1:
                dims[ax] = n_glob
                wrap[ax] = 1
                per_axis.append([(cells[:, ax],
                                  np.zeros(len(gids), np.int64),
                                  np.ones(len(gids), bool))])
                continue
            n_loc = int(dmap.cells_per_rank[ax])
            dims[ax] = n_loc + 2 * margin
            rel = cells[:, ax] - int(lo[ax])
            base = rel % n_glob + margin
            m0 = -(rel // n_glob)
            opts = []
            for k in (-1, 0, 1):
                s = base + k * n_glob
                ok = (s >= 0) & (s < dims[ax])
                if np.any(ok):
                    opts.append((s, m0 + k, ok))
            per_axis.append(opts)
        row_parts, coord_parts, pos_parts = [], [], []
        for sx, mx, okx in per_axis[0]:
            for sy, my, oky in per_axis[1]:
                for sz, mz, okz in per_axis[2]:
                    sel = np.flatnonzero(okx & oky & okz)
                    if not len(sel):
                        continue
                    row_parts.append(sel)
                    coord_parts.append(np.stack(
                        [sx[sel], sy[sel], sz[sel]], axis=1))
                    image = np.stack(
                        [mx[sel], my[sel], mz[sel]], axis=1).astype(float)
                    pos_parts.append(w[sel] + image * self.box.lengths)
        rows = np.concatenate(row_parts)
        coords = np.ascontiguousarray(np.concatenate(coord_parts))
        pos = np.ascontiguousarray(np.concatenate(pos_parts))
        keep = (self._owner[gids] == rank).astype(np.uint8)[rows]
        i, j = _run_sweep(coords, dims, wrap, self.box.lengths, self._offs,
                          pos, gids[rows], plan.mol_loc[rank][rows], keep,
                          self.r_list * self.r_list)
        return _canonical_pairs(i, j)

    def begin_step(self, q, p, tau):
        self._plan = None
        self._q0 = q.copy()
        plan = _StepPlan()
        plan.owned = [np.flatnonzero(self._owner == r)
                      for r in range(self.ranks)]
        ghosts = exchange_ghosts(self._rank_records(q, q, p), self.dmap,
                                 self.fabric)
        plan.ghost_gid = [g["gid"] for g in ghosts]
        plan.loc_gid = [np.concatenate([plan.owned[r], plan.ghost_gid[r]])
                        for r in range(self.ranks)]
        plan.mol_loc = [np.concatenate([self.system.molecule[plan.owned[r]],
                                        ghosts[r]["molecule"]])
                        for r in range(self.ranks)]
        plan.lq = [np.concatenate([q[plan.owned[r]], ghosts[r]["q"]])
                   for r in range(self.ranks)]
        plan.lu = [a.copy() for a in plan.lq]
        plan.bind = [reattach_molecules(self.tables, self._owner, r,
                                        plan.loc_gid[r])
                     for r in range(self.ranks)]

        rank_pairs = [self._sweep_rank(plan, r) for r in range(self.ranks)]
        merged = np.concatenate(rank_pairs, axis=0)
        merged = merged[np.lexsort((merged[:, 1], merged[:, 0]))]
        if len(merged) > 1:
            dup = (np.diff(merged[:, 0]) == 0) & (np.diff(merged[:, 1]) == 0)
            if np.any(dup):
                raise RuntimeError("pair owned by more than one rank")
        self._set_pair_list(merged)

        plan.pair_rows = []
        plan.pair_lidx = []
        for r in range(self.ranks):
            rows = np.flatnonzero(self._owner[merged[:, 0]] == r) \
                if len(merged) else np.zeros(0, np.int64)
            plan.pair_rows.append(rows)
            sorter = np.argsort(plan.loc_gid[r], kind="stable")
            skey = plan.loc_gid[r][sorter]
            flat = merged[rows].ravel()
            pos = np.searchsorted(skey, flat)
            if len(flat) and (np.any(pos >= len(skey)) or np.any(
                    skey[np.minimum(pos, len(skey) - 1)] != flat)):
                raise ConfigurationError(
                    f"ghost border too thin for a pair on rank {r}")
            plan.pair_lidx.append(sorter[pos].reshape(-1, 2))
        self._plan = plan
        SerialEngine.begin_step(self, q, p, tau)

    def _refresh(self, q_sel, u):
        """Re-exchange ghosts so every rank sees the given trial state.

        Selection runs on the step-start positions, so the ghost sets the
        plan was built from stay fixed while values update.
        """
        plan = self._plan
        ghosts = exchange_ghosts(self._rank_records(q_sel, u, None),
                                 self.dmap, self.fabric)
        for r in range(self.ranks):
            if not np.array_equal(ghosts[r]["gid"], plan.ghost_gid[r]):
                raise RuntimeError("ghost set changed inside a step")
            k = len(plan.owned[r])
            plan.lq[r][:k] = q_sel[plan.owned[r]]
            plan.lq[r][k:] = ghosts[r]["q"]
            plan.lu[r][:k] = u[plan.owned[r]]
            plan.lu[r][k:] = ghosts[r]["q_trial"]

    # -- distributed assemblies ----------------------------------------------

    def dg_assemble(self, q, u, variant="symmetric"):
        """Discrete gradient assembled from per-rank evaluations."""
        code = variant_code(variant)
        self._refresh(q, u)
        plan = self._plan
        t = self.tables
        idx_parts, val_parts = [], []
        v_q = 0.0
        v_u = 0.0
        self.counts["assemblies"] += 1

        nb = len(t.bond_idx)
        if nb:
            g = np.empty((nb, 3))
            vq_a = np.empty(nb)
            vu_a = np.empty(nb)
            for r in range(self.ranks):
                rows, lidx = plan.bind[r]["bond"]
                if not len(rows):
                    continue
                xb = plan.lq[r][lidx]
                ub = plan.lu[r][lidx]
                if self._bond_shift is not None:
                    xb = xb + self._bond_shift[rows]
                    ub = ub + self._bond_shift[rows]
                gr, vq_r, vu_r = kernels.pair_dg_kernel(
                    xb[:, 0], xb[:, 1], ub[:, 0], ub[:, 1],
                    t.bond_code[rows], t.bond_k[rows], t.bond_r0[rows],
                    t.bond_zero[rows], t.bond_zero[rows])
                g[rows] = gr
                vq_a[rows] = vq_r
                vu_a[rows] = vu_r
                self.term_audit["bond"][rows] += 1
            idx_parts += [t.bond_idx[:, 0], t.bond_idx[:, 1]]
            val_parts += [-g, g]
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["bond"] += nb

        na = len(t.angle_idx)
        if na:
            g = np.empty((na, 3, 3))
            vq_a = np.empty(na)
            vu_a = np.empty(na)
            for r in range(self.ranks):
                rows, lidx = plan.bind[r]["angle"]
                if not len(rows):
                    continue
                xa = plan.lq[r][lidx]
                ua = plan.lu[r][lidx]
                if self._angle_shift is not None:
                    xa = xa + self._angle_shift[rows]
                    ua = ua + self._angle_shift[rows]
                gr, vq_r, vu_r = kernels.angle_dg_kernel(
                    xa, ua, t.angle_k[rows], t.angle_cos0[rows], code)
                g[rows] = gr
                vq_a[rows] = vq_r
                vu_a[rows] = vu_r
                self.term_audit["angle"][rows] += 1
            for s in range(3):
                idx_parts.append(t.angle_idx[:, s])
                val_parts.append(g[:, s])
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["angle"] += na

        nt = len(t.tors_idx)
        if nt:
            g = np.empty((nt, 4, 3))
            vq_a = np.empty(nt)
            vu_a = np.empty(nt)
            ok = np.ones(nt)
            for r in range(self.ranks):
                rows, lidx = plan.bind[r]["torsion"]
                if not len(rows):
                    continue
                xt = plan.lq[r][lidx]
                ut = plan.lu[r][lidx]
                if self._tors_shift is not None:
                    xt = xt + self._tors_shift[rows]
                    ut = ut + self._tors_shift[rows]
                gr, vq_r, vu_r, ok_r = kernels.dihedral_dg_kernel(
                    xt, ut, t.tors_k[rows], t.tors_coeffs[rows], code)
                g[rows] = gr
                vq_a[rows] = vq_r
                vu_a[rows] = vu_r
                ok[rows] = ok_r
                self.term_audit["torsion"][rows] += 1
            if np.any(ok == 0.0):
                raise GeometryError(
                    "collinear torsion geometry; angle undefined")
            for s in range(4):
                idx_parts.append(t.tors_idx[:, s])
                val_parts.append(g[:, s])
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["torsion"] += nt

        if len(self.pair_idx):
            mask, views = self._pair_masks(plan, dg=True)
            act = np.flatnonzero(mask)
            gj = np.empty((len(act), 3))
            vq_a = np.empty(len(act))
            vu_a = np.empty(len(act))
            p0, p1, p2, p3 = self.pair_params
            covered = 0
            for r in range(self.ranks):
                rows = plan.pair_rows[r]
                sub = np.flatnonzero(mask[rows])
                if not len(sub):
                    continue
                xi, xj, ui, uj = views[r]
                rsel = rows[sub]
                out = np.searchsorted(act, rsel)
                gr, vq_r, vu_r = kernels.pair_dg_kernel(
                    xi[sub], xj[sub], ui[sub], uj[sub],
                    self.pair_code[rsel], p0[rsel], p1[rsel], p2[rsel],
                    p3[rsel])
                gj[out] = gr
                vq_a[out] = vq_r
                vu_a[out] = vu_r
                covered += len(sub)
            if covered != len(act):
                raise RuntimeError("active pair evaluated by no rank")
            idx_parts += [self.pair_idx[act, 0], self.pair_idx[act, 1]]
            val_parts += [-gj, gj]
            v_q += float(np.sum(vq_a))
            v_u += float(np.sum(vu_a))
            self.counts["pair"] += len(act)

        return DGEvaluation(self._scatter(idx_parts, val_parts), v_q, v_u)

    def force_assemble(self, q):
        """Force assembled from per-rank evaluations at one geometry."""
        self._refresh(self._q0, q)
        plan = self._plan
        t = self.tables
        idx_parts, val_parts = [], []
        v = 0.0
        self.counts["assemblies"] += 1

        nb = len(t.bond_idx)
        if nb:
            f = np.empty((nb, 3))
            v_a = np.empty(nb)
            for r in range(self.ranks):
                rows, lidx = plan.bind[r]["bond"]
                if not len(rows):
                    continue
                xb = plan.lu[r][lidx]
                if self._bond_shift is not None:
                    xb = xb + self._bond_shift[rows]
                fr, v_r = kernels.pair_force_kernel(
                    xb[:, 0], xb[:, 1], t.bond_code[rows], t.bond_k[rows],
                    t.bond_r0[rows], t.bond_zero[rows], t.bond_zero[rows])
                f[rows] = fr
                v_a[rows] = v_r
                self.term_audit["bond"][rows] += 1
            idx_parts += [t.bond_idx[:, 0], t.bond_idx[:, 1]]
            val_parts += [-f, f]
            v += float(np.sum(v_a))
            self.counts["bond"] += nb

        na = len(t.angle_idx)
        if na:
            g = np.empty((na, 3, 3))
            v_a = np.empty(na)
            for r in range(self.ranks):
                rows, lidx = plan.bind[r]["angle"]
                if not len(rows):
                    continue
                xa = plan.lu[r][lidx]
                if self._angle_shift is not None:
                    xa = xa + self._angle_shift[rows]
                gr, v_r = kernels.angle_force_kernel(
                    xa, t.angle_k[rows], t.angle_cos0[rows])
                g[rows] = gr
                v_a[rows] = v_r
                self.term_audit["angle"][rows] += 1
            for s in range(3):
                idx_parts.append(t.angle_idx[:, s])
                val_parts.append(g[:, s])
            v += float(np.sum(v_a))
            self.counts["angle"] += na

        nt = len(t.tors_idx)
        if nt:
            g = np.empty((nt, 4, 3))
            v_a = np.empty(nt)
            ok = np.ones(nt)
            for r in range(self.ranks):
                rows, lidx = plan.bind[r]["torsion"]
                if not len(rows):
                    continue
                xt = plan.lu[r][lidx]
                if self._tors_shift is not None:
                    xt = xt + self._tors_shift[rows]
                gr, v_r, ok_r = kernels.dihedral_force_kernel(
                    xt, t.tors_k[rows], t.tors_coeffs[rows])
                g[rows] = gr
                v_a[rows] = v_r
                ok[rows] = ok_r
                self.term_audit["torsion"][rows] += 1
            if np.any(ok == 0.0):
                raise GeometryError(
                    "collinear torsion geometry; angle undefined")
            for s in range(4):
                idx_parts.append(t.tors_idx[:, s])
                val_parts.append(g[:, s])
            v += float(np.sum(v_a))
            self.counts["torsion"] += nt

        if len(self.pair_idx):
            mask, views = self._pair_masks(plan, dg=False)
            act = np.flatnonzero(mask)
            fj = np.empty((len(act), 3))
            v_a = np.empty(len(act))
            p0, p1, p2, p3 = self.pair_params
            covered = 0
            for r in range(self.ranks):
                rows = plan.pair_rows[r]
                sub = np.flatnonzero(mask[rows])
                if not len(sub):
                    continue
                xi, xj = views[r][:2]
                rsel = rows[sub]
                out = np.searchsorted(act, rsel)
                fr, v_r = kernels.pair_force_kernel(
                    xi[sub], xj[sub], self.pair_code[rsel], p0[rsel],
                    p1[rsel], p2[rsel], p3[rsel])
                fj[out] = fr
                v_a[out] = v_r
                covered += len(sub)
            if covered != len(act):
                raise RuntimeError("active pair evaluated by no rank")
            idx_parts += [self.pair_idx[act, 0], self.pair_idx[act, 1]]
            val_parts += [-fj, fj]
            v += float(np.sum(v_a))
            self.counts["pair"] += len(act)

        return ForceEvaluation(self._scatter(idx_parts, val_parts), v)

    def _pair_masks(self, plan, dg):
        """Per-rank pair gathers plus the merged activity mask.

        Discrete-gradient sweeps gather the step-start geometry on the x
        side and the trial one on the u side; force sweeps evaluate a
        single geometry, held in the u buffers.
        """
        mask = np.zeros(len(self.pair_idx), bool)
        views = []
        for r in range(self.ranks):
            lidx = plan.pair_lidx[r]
            rows = plan.pair_rows[r]
            src = plan.lq[r] if dg else plan.lu[r]
            xi = src[lidx[:, 0]]
            xj = src[lidx[:, 1]]
            ui = plan.lu[r][lidx[:, 0]]
            uj = plan.lu[r][lidx[:, 1]]
            if self._pair_shift is not None:
                xj = xj + self._pair_shift[rows]
                uj = uj + self._pair_shift[rows]
            mask[rows] = kernels.pair_active_kernel(
                xi, xj, ui, uj, self.forcefield.r_cut)
            views.append((xi, xj, ui, uj))
        return mask, views

    def end_step(self, q_prev, q_next):
        CellEngine.end_step(self, q_prev, q_next)
        self._owner = migrate(self._owner, q_next, self.dmap,
                              system=self.system, fabric=self.fabric)
        self._plan = None
