"""Plain-text data files, trajectory frames and diagnostics streams.

The particle data format follows the two-section layout used by the bundled
experiment inputs: a ``Positions`` section with rows ``id [molecule] x y z``
and an optional ``Velocities`` section with rows ``id vx vy vz``.  Particle
ids are 1-based and must be dense; both sections carry an explicit leading id
column.  All floats are emitted with shortest-roundtrip formatting (``repr``)
so that write -> parse is the identity.
"""

from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .core import DIAGNOSTICS_HEADER, DiagnosticsRecord, ParseError

_SECTIONS = ("Positions", "Velocities")


@dataclass
class DataFile:
    """Parsed particle data in id order (row k holds particle id k+1)."""

    q: np.ndarray
    v: np.ndarray
    molecule: np.ndarray
    has_molecules: bool = False

    @property
    def n(self):
        return len(self.q)


@contextmanager
def _sink(target, mode="w"):
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, mode, encoding="utf-8", newline="") as handle:
            yield handle


def _source_text(source):
    if hasattr(source, "read"):
        return source.read()
    text = str(source)
    if "\n" in text or text.strip() in _SECTIONS:
        return text
    try:
        with open(text, encoding="utf-8") as handle:
            return handle.read()
    except OSError:
        return text


def _parse_rows(rows, section, mol_column, widths):
    """Convert raw rows to (id, numbers) pairs, enforcing a uniform width."""
    out = {}
    width = None
    for line_no, fields in rows:
        if width is None:
            if len(fields) not in widths:
                raise ParseError(
                    f"line {line_no}: {section} row has {len(fields)} fields,"
                    f" expected one of {sorted(widths)}")
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(
                f"line {line_no}: ragged {section} row "
                f"({len(fields)} fields, section uses {width})")
        try:
            pid = int(fields[0])
        except ValueError:
            raise ParseError(
                f"line {line_no}: particle id {fields[0]!r} is not an integer"
            ) from None
        if pid in out:
            raise ParseError(f"line {line_no}: duplicate particle id {pid}")
        tail = fields[1:]
        try:
            if mol_column and width == max(widths):
                values = (int(tail[0]), *(float(t) for t in tail[1:]))
            else:
                values = tuple(float(t) for t in tail)
        except ValueError:
            raise ParseError(
                f"line {line_no}: malformed number in {section} row") from None
        out[pid] = values
    return out, width


def _dense(ids, section):
    n = len(ids)
    if sorted(ids) != list(range(1, n + 1)):
        raise ParseError(f"{section} ids must be dense from 1 (got {n} rows)")
    return n


def parse_data_file(source):
    """Read a two-section particle data file.

    Returns a DataFile with positions, velocities (zero when the section is
    absent) and per-particle molecule ids (-1 when the positions rows carry
    no molecule column).  Raises ParseError with a line number on duplicate
    ids, unknown or repeated sections and ragged rows.
    """
    text = _source_text(source)
    sections = {}
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line in _SECTIONS:
            if line in sections:
                raise ParseError(f"line {line_no}: duplicate {line} section")
            current = line
            sections[current] = []
            continue
        if current is None:
            raise ParseError(
                f"line {line_no}: data before any section header")
        sections[current].append((line_no, line.split()))

    if "Positions" not in sections:
        raise ParseError("missing Positions section")
    pos, width = _parse_rows(sections["Positions"], "Positions",
                             mol_column=True, widths={4, 5})
    n = _dense(pos.keys(), "Positions")
    has_mol = width == 5

    q = np.zeros((n, 3))
    molecule = np.full(n, -1, dtype=np.int64)
    for pid, values in pos.items():
        if has_mol:
            molecule[pid - 1] = values[0]
            q[pid - 1] = values[1:]
        else:
            q[pid - 1] = values

    v = np.zeros((n, 3))
    if "Velocities" in sections:
        vel, _ = _parse_rows(sections["Velocities"], "Velocities",
                             mol_column=False, widths={4})
        if _dense(vel.keys(), "Velocities") != n:
            raise ParseError(
                f"Velocities section has {len(vel)} rows, expected {n}")
        for pid, values in vel.items():
            v[pid - 1] = values
    return DataFile(q=q, v=v, molecule=molecule, has_molecules=has_mol)


def write_data_file(target, q, v=None, molecule=None):
    """Emit the two-section format; parse_data_file inverts this exactly."""
    q = np.asarray(q, dtype=float)
    n = len(q)
    has_mol = molecule is not None and np.any(np.asarray(molecule) >= 0)
    with _sink(target) as handle:
        handle.write("Positions\n\n")
        for k in range(n):
            row = [str(k + 1)]
            if has_mol:
                row.append(str(int(molecule[k])))
            row += [repr(float(x)) for x in q[k]]
            handle.write(" ".join(row) + "\n")
        if v is not None:
            handle.write("\nVelocities\n\n")
            for k in range(n):
                row = [str(k + 1)] + [repr(float(x)) for x in np.asarray(v)[k]]
                handle.write(" ".join(row) + "\n")


def data_file_text(q, v=None, molecule=None):
    buffer = io.StringIO()
    write_data_file(buffer, q, v=v, molecule=molecule)
    return buffer.getvalue()


def write_xyz_frame(target, step, time, system, labels=None, box=None):
    """Append one extended-XYZ frame, rows ordered by global id.

    `labels` maps species index -> column label; unnamed species fall back
    to "S<index>".  Coordinates keep full shortest-roundtrip precision.
    """
    order = np.argsort(system.global_id, kind="stable")
    comment = [f'Properties=species:S:1:pos:R:3 Time={repr(float(time))}',
               f"Step={int(step)}"]
    if box is not None and box.periodic:
        lx, ly, lz = (repr(float(x)) for x in box.lengths)
        comment.insert(0, f'Lattice="{lx} 0.0 0.0 0.0 {ly} 0.0 0.0 0.0 {lz}"')
    with _sink(target, mode="a") as handle:
        handle.write(f"{len(order)}\n")
        handle.write(" ".join(comment) + "\n")
        for k in order:
            s = int(system.species[k])
            label = labels[s] if labels is not None else f"S{s}"
            x, y, z = (repr(float(c)) for c in system.q[k])
            handle.write(f"{label} {x} {y} {z}\n")


def write_diagnostics_csv(target, records):
    """Header plus one row per record, floats in shortest-roundtrip form."""
    with _sink(target) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(DIAGNOSTICS_HEADER.split(","))
        for rec in records:
            writer.writerow([value if isinstance(value, (int, np.integer))
                             else repr(float(value))
                             for value in rec.as_row()])


def read_diagnostics_csv(source):
    """Inverse of write_diagnostics_csv; returns DiagnosticsRecord list."""
    text = _source_text(source)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != DIAGNOSTICS_HEADER.split(","):
        raise ParseError("unrecognized diagnostics header")
    records = []
    for row in reader:
        if not row:
            continue
        if len(row) != 13:
            raise ParseError(f"diagnostics row has {len(row)} fields")
        nums = [float(x) for x in row]
        records.append(DiagnosticsRecord(
            step=int(row[0]), time=nums[1], kinetic=nums[2],
            potential=nums[3], total=nums[4],
            momentum=np.array(nums[5:8]),
            angular_momentum=np.array(nums[8:11]),
            newton_iterations=int(row[11]), cg_iterations=int(row[12])))
    return records
