"""Fixed-column PDB reading and writing (CRYST1, ATOM/HETATM, REMARK 290)."""

from __future__ import annotations

import logging
from fractions import Fraction

import numpy as np

from ..cell_sym import SymOp, UnitCell
from ..errors import ParseError, XtalError

log = logging.getLogger(__name__)

__all__ = ["read_pdb", "write_pdb", "read_symmetry_ops"]

# Elements recognised when deriving a symbol from the atom-name columns.
_TWO_LETTER = {"NA", "MG", "CL", "CA", "FE", "ZN", "MN", "CU", "BR", "SE"}


def _decode(data) -> list[str]:
    if isinstance(data, bytes):
        data = data.decode("latin-1")
    return data.splitlines()


def _field(line: str, start: int, stop: int) -> str:
    """1-based inclusive column slice, padded if the line is short."""
    return line[start - 1 : stop].ljust(stop - start + 1)


def _float_field(line, start, stop, lineno, what, default=None):
    text = _field(line, start, stop).strip()
    if not text:
        if default is not None:
            return default
        raise ParseError(f"empty {what} field", line=lineno)
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"malformed {what} field {text!r}", line=lineno) from None


def _element_from_name(name: str) -> str:
    head = name[:2].strip().upper()
    if name[0] != " " and head in _TWO_LETTER:
        return head
    for ch in name:
        if ch.isalpha():
            return ch.upper()
    return ""


def read_pdb(data):
    """Parse CRYST1 and ATOM/HETATM records.

    Returns (AtomicModel, UnitCell, space-group name). When one atom carries
    several altlocs, the highest-occupancy one is kept (ties go to 'A').
    """
    from .types import AtomicModel

    lines = _decode(data)
    cell = None
    sg_name = ""
    records = []
    for i, line in enumerate(lines, start=1):
        tag = line[:6]
        if tag == "CRYST1":
            cell = UnitCell(
                a=_float_field(line, 7, 15, i, "cell a"),
                b=_float_field(line, 16, 24, i, "cell b"),
                c=_float_field(line, 25, 33, i, "cell c"),
                alpha=_float_field(line, 34, 40, i, "cell alpha"),
                beta=_float_field(line, 41, 47, i, "cell beta"),
                gamma=_float_field(line, 48, 54, i, "cell gamma"),
            )
            sg_name = _field(line, 56, 66).strip()
        elif tag in ("ATOM  ", "HETATM"):
            name = _field(line, 13, 16)
            altloc = _field(line, 17, 17)
            occ = _float_field(line, 55, 60, i, "occupancy", default=1.0)
            b = _float_field(line, 61, 66, i, "B-factor", default=20.0)
            element = _field(line, 77, 78).strip().upper()
            if not element:
                element = _element_from_name(name)
            if not element:
                raise ParseError(f"cannot determine element for atom {name!r}", line=i)
            records.append(
                dict(
                    line=i,
                    name=name,
                    altloc=altloc,
                    resname=_field(line, 18, 20).strip(),
                    chain=_field(line, 22, 22),
                    resseq=int(_field(line, 23, 26).strip() or 0),
                    icode=_field(line, 27, 27),
                    x=_float_field(line, 31, 38, i, "x"),
                    y=_float_field(line, 39, 46, i, "y"),
                    z=_float_field(line, 47, 54, i, "z"),
                    occ=occ,
                    b=b,
                    element=element,
                )
            )
    if cell is None:
        raise ParseError("no CRYST1 record found (the forward model needs the unit cell)")
    if not records:
        raise ParseError("no ATOM/HETATM records found")

    chosen: dict = {}
    order: list = []
    n_alt_dropped = 0
    for rec in records:
        key = (rec["chain"], rec["resseq"], rec["icode"], rec["name"])
        prev = chosen.get(key)
        if prev is None:
            chosen[key] = rec
            order.append(key)
        else:
            n_alt_dropped += 1
            if rec["occ"] > prev["occ"] or (rec["occ"] == prev["occ"] and rec["altloc"] < prev["altloc"]):
                chosen[key] = rec
    if n_alt_dropped:
        log.info("dropped %d alternate-location records (kept highest occupancy)", n_alt_dropped)

    kept = [chosen[k] for k in order]
    occ = np.clip([r["occ"] for r in kept], 0.0, 1.0)
    b = np.maximum([r["b"] for r in kept], 0.01)
    model = AtomicModel(
        element=np.array([r["element"] for r in kept]),
        xyz=np.array([[r["x"], r["y"], r["z"]] for r in kept]),
        occupancy=occ,
        b_iso=b,
        atom_name=np.array([r["name"] for r in kept]),
        resname=np.array([r["resname"] for r in kept]),
        chain=np.array([r["chain"] for r in kept]),
        resseq=np.array([r["resseq"] for r in kept], dtype=int),
        icode=np.array([r["icode"] for r in kept]),
        altloc=np.array([r["altloc"] for r in kept]),
        cell=cell,
    )
    return model, cell, sg_name


def read_symmetry_ops(data) -> list[SymOp] | None:
    """Extract symmetry operations from REMARK 290 SMTRY records, if present."""
    rows: dict[int, list] = {}
    for i, line in enumerate(_decode(data), start=1):
        if not line.startswith("REMARK 290") or "SMTRY" not in line:
            continue
        fields = line.split()
        try:
            smtry = fields[2]            # SMTRY1 / SMTRY2 / SMTRY3
            row = int(smtry[-1]) - 1
            op_no = int(fields[3])
            values = [float(v) for v in fields[4:8]]
        except (IndexError, ValueError):
            raise ParseError(f"malformed SMTRY record {line!r}", line=i) from None
        rows.setdefault(op_no, [None, None, None])[row] = values
    if not rows:
        return None
    ops = []
    for op_no in sorted(rows):
        mat = rows[op_no]
        if any(r is None for r in mat):
            raise ParseError(f"incomplete SMTRY rows for operator {op_no}")
        rot = np.array([r[:3] for r in mat])
        rot_int = np.rint(rot).astype(int)
        if np.max(np.abs(rot - rot_int)) > 1e-6:
            raise ParseError(f"non-integer SMTRY rotation for operator {op_no}")
        trans = tuple(Fraction(round(r[3] * 12), 12) for r in mat)
        for r, t in zip(mat, trans):
            if abs(r[3] - float(t)) > 1e-6:
                raise ParseError(f"SMTRY translation {r[3]} is not a twelfth for operator {op_no}")
        ops.append(SymOp(rot_int, trans))
    return ops


def write_pdb(model, cell: UnitCell, sg_name: str = "P 1") -> bytes:
    """Serialize to fixed-column PDB; raises when a value overflows its field."""
    out = [
        f"CRYST1{cell.a:9.3f}{cell.b:9.3f}{cell.c:9.3f}"
        f"{cell.alpha:7.2f}{cell.beta:7.2f}{cell.gamma:7.2f} {sg_name:<11s}{1:4d}"
    ]
    for i in range(model.n_atoms):
        x, y, z = model.xyz[i]
        if not (-999.999 <= x <= 9999.999 and -999.999 <= y <= 9999.999 and -999.999 <= z <= 9999.999):
            raise XtalError(f"atom {i + 1} coordinate {model.xyz[i]} exceeds PDB fixed-width columns")
        b = float(model.b_iso[i])
        if b > 999.99:
            raise XtalError(f"atom {i + 1} B-factor {b} exceeds PDB fixed-width columns")
        serial = i + 1
        if serial > 99999:
            raise XtalError("more than 99999 atoms do not fit PDB serial columns")
        name = str(model.atom_name[i])[:4].ljust(4)
        out.append(
            f"ATOM  {serial:5d} {name}{str(model.altloc[i])[:1]}{str(model.resname[i]):>3s} "
            f"{str(model.chain[i])[:1]}{int(model.resseq[i]):4d}{str(model.icode[i])[:1]}   "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{float(model.occupancy[i]):6.2f}{b:6.2f}"
            f"          {str(model.element[i]):>2s}"
        )
    out.append("END")
    return ("\n".join(out) + "\n").encode("ascii")
