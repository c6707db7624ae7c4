"""Minimal reader/writer for the classic binary MTZ reflection format.

Layout handled here: 4-byte magic ``MTZ ``, word 2 the 1-based word offset of
the header, word 3 the machine stamp (endianness), reflection data as
contiguous 4-byte IEEE floats from word 21, then 80-character header records
(NCOL, CELL, SYMINF, SYMM, COLUMN, END). Batch headers (unmerged data) are out
of scope.
"""

from __future__ import annotations

import logging
import re
import struct

import numpy as np

from ..cell_sym import SpaceGroup, UnitCell
from ..errors import ParseError
from .types import ReflectionSet

log = logging.getLogger(__name__)

__all__ = ["read_mtz", "write_mtz", "read_mtz_crystal_info"]

MAGIC = b"MTZ "
_LE_STAMP = bytes((0x44, 0x41, 0x00, 0x00))
_BE_STAMP = bytes((0x11, 0x11, 0x00, 0x00))
_DATA_START = 80  # word 21

AMPLITUDE_LABELS = ["F", "FP", "FOBS", "FO", "F-OBS", "FOSC", "FMEAS"]
SIGMA_LABELS = ["SIGF", "SIGFP", "SIGFOBS", "SIGFO", "SIGF-OBS", "SIGFMEAS"]
FREE_LABELS = ["FREER_FLAG", "R-FREE-FLAGS", "FREERFLAG", "FREE", "RFREE", "FREER"]


def _detect_endianness(data: bytes) -> str:
    stamp_nibble = data[8] >> 4
    candidates = {4: "<", 1: ">"}.get(stamp_nibble)
    order = [candidates] if candidates else []
    order += [e for e in ("<", ">") if e not in order]
    for endian in order:
        (pos,) = struct.unpack(endian + "i", data[4:8])
        byte_off = (pos - 1) * 4
        if _DATA_START <= byte_off <= len(data) - 80:
            return endian
    raise ParseError("cannot locate MTZ header (corrupt offset or truncated file)")


def _header_records(data: bytes, endian: str) -> list[str]:
    (pos,) = struct.unpack(endian + "i", data[4:8])
    byte_off = (pos - 1) * 4
    records = []
    for start in range(byte_off, len(data), 80):
        rec = data[start : start + 80].decode("ascii", errors="replace").rstrip()
        records.append(rec)
        if rec.split(maxsplit=1) and rec.split(maxsplit=1)[0] == "END":
            break
    return records


def _parse_header(records: list[str]):
    ncol = nrefl = None
    columns = []
    cell = None
    sg_name = None
    for rec in records:
        fields = rec.split()
        if not fields:
            continue
        key = fields[0]
        if key == "NCOL":
            ncol, nrefl = int(fields[1]), int(fields[2])
        elif key == "COLUMN":
            # COLUMN <label> <type> <min> <max> [dataset-id]
            columns.append((fields[1], fields[2]))
        elif key == "CELL":
            cell = UnitCell(*(float(v) for v in fields[1:7]))
        elif key == "SYMINF":
            m = re.search(r"'([^']*)'", rec)
            if m:
                sg_name = m.group(1)
        elif key == "END":
            break
    if ncol is None:
        raise ParseError("MTZ header has no NCOL record")
    if not columns:
        raise ParseError("MTZ header has no COLUMN records")
    if len(columns) != ncol:
        raise ParseError(f"MTZ header declares {ncol} columns but lists {len(columns)}")
    return ncol, nrefl, columns, cell, sg_name


def _find_column(columns, wanted_labels, wanted_type=None):
    labels = [label.upper() for label, _ in columns]
    for want in wanted_labels:
        if want.upper() in labels:
            return labels.index(want.upper())
    if wanted_type is not None:
        for i, (_, ctype) in enumerate(columns):
            if ctype == wanted_type:
                return i
    return None


def _check_magic(data: bytes):
    if len(data) < _DATA_START:
        raise ParseError("file too short to be an MTZ file")
    if data[:4] != MAGIC:
        raise ParseError(f"bad MTZ magic {data[:4]!r}, expected {MAGIC!r}")


def read_mtz(data: bytes, free_value: int = 0) -> ReflectionSet:
    """Parse reflections; H/K/L plus an amplitude column are required.

    Sigma and free-flag columns are resolved by a prioritized label search;
    rows with non-finite (missing-number-flag) values are dropped with a
    logged count. ``free_value`` is the flag value marking the free set.
    """
    _check_magic(data)
    endian = _detect_endianness(data)
    ncol, nrefl, columns, _, _ = _parse_header(_header_records(data, endian))

    need = ncol * nrefl * 4
    if len(data) < _DATA_START + need:
        raise ParseError("MTZ reflection data truncated")
    table = np.frombuffer(data, dtype=endian + "f4", count=ncol * nrefl, offset=_DATA_START)
    table = table.reshape(nrefl, ncol)

    ih = _find_column(columns, ["H"])
    ik = _find_column(columns, ["K"])
    il = _find_column(columns, ["L"])
    if None in (ih, ik, il):
        raise ParseError("MTZ file lacks H/K/L columns")
    i_f = _find_column(columns, AMPLITUDE_LABELS, wanted_type="F")
    if i_f is None:
        have = ", ".join(label for label, _ in columns)
        raise ParseError(f"no amplitude column found (looked for {'/'.join(AMPLITUDE_LABELS)}; file has: {have})")
    i_sig = _find_column(columns, SIGMA_LABELS, wanted_type="Q")
    i_free = _find_column(columns, FREE_LABELS)

    cols = [ih, ik, il, i_f] + ([i_sig] if i_sig is not None else []) + ([i_free] if i_free is not None else [])
    finite = np.all(np.isfinite(table[:, cols]), axis=1)
    n_dropped = int(np.sum(~finite))
    if n_dropped:
        log.warning("dropped %d MTZ rows with missing (NaN-coded) values", n_dropped)
    table = table[finite]

    hkl = np.rint(table[:, [ih, ik, il]]).astype(int)
    f_obs = np.maximum(table[:, i_f].astype(float), 0.0)
    sigma = np.maximum(table[:, i_sig].astype(float), 0.0) if i_sig is not None else np.zeros(len(table))
    if i_free is not None:
        free = np.rint(table[:, i_free]).astype(int) == free_value
    else:
        free = np.zeros(len(table), dtype=bool)
    return ReflectionSet(hkl=hkl, f_obs=f_obs, sigma=sigma, free_flag=free)


def read_mtz_crystal_info(data: bytes):
    """Return (UnitCell | None, space-group name | None) from the header."""
    _check_magic(data)
    endian = _detect_endianness(data)
    _, _, _, cell, sg_name = _parse_header(_header_records(data, endian))
    return cell, sg_name


def _format_record(text: str) -> bytes:
    if len(text) > 80:
        text = text[:80]
    return text.ljust(80).encode("ascii")


def write_mtz(refl: ReflectionSet, cell: UnitCell | None = None,
              spacegroup: SpaceGroup | None = None) -> bytes:
    """Serialize columns H K L F SIGF FreeR_flag (free rows get flag 0).

    Output is canonical: no timestamps, fixed titles, so identical reflection
    sets produce identical bytes.
    """
    ncol = 6
    nrefl = refl.n
    table = np.empty((nrefl, ncol), dtype="<f4")
    table[:, 0:3] = refl.hkl
    table[:, 3] = refl.f_obs
    table[:, 4] = refl.sigma
    table[:, 5] = np.where(refl.free_flag, 0.0, 1.0)

    header_word = 21 + ncol * nrefl
    out = bytearray()
    out += MAGIC
    out += struct.pack("<i", header_word)
    out += _LE_STAMP
    out += b"\x00" * (_DATA_START - len(out))
    out += table.tobytes()

    def col_range(idx):
        if nrefl == 0:
            return 0.0, 0.0
        return float(table[:, idx].min()), float(table[:, idx].max())

    records = [
        "VERS MTZ:V1.1",
        "TITLE xtalforge reflections",
        f"NCOL {ncol:8d} {nrefl:12d} {0:8d}",
    ]
    if cell is not None:
        records.append(
            f"CELL  {cell.a:9.4f} {cell.b:9.4f} {cell.c:9.4f}"
            f" {cell.alpha:9.4f} {cell.beta:9.4f} {cell.gamma:9.4f}"
        )
    if spacegroup is not None:
        records.append(
            f"SYMINF {spacegroup.n_ops:3d} {spacegroup.n_ops:2d} "
            f"{spacegroup.name[:1].upper()} {0:5d} '{spacegroup.name}' PG1"
        )
        for op in spacegroup.ops:
            records.append(f"SYMM {op.triplet().upper()}")
    records.append("VALM NAN")
    names = ["H", "K", "L", "F", "SIGF", "FreeR_flag"]
    types = ["H", "H", "H", "F", "Q", "I"]
    for i, (name, ctype) in enumerate(zip(names, types)):
        lo, hi = col_range(i)
        records.append(f"COLUMN {name:<30s} {ctype} {lo:17.4f} {hi:17.4f}    0")
    records.append("END")
    for rec in records:
        out += _format_record(rec)
    return bytes(out)
