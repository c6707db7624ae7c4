"""Portable text formats: the reflection sidecar and the metrics log."""

from __future__ import annotations

import json
import math

import numpy as np

from ..errors import ParseError
from .types import ReflectionSet

__all__ = [
    "REFLECTION_HEADER",
    "read_reflection_text",
    "write_reflection_text",
    "format_metric_record",
    "write_metrics_log",
    "read_metrics_log",
]

REFLECTION_HEADER = "#xtalforge-refl v1"


def write_reflection_text(refl: ReflectionSet) -> bytes:
    """Columns ``h k l F sigF free`` (free: 1 = held out). Floats use the
    shortest round-trip representation, so finite values survive bit-exactly."""
    lines = [REFLECTION_HEADER]
    for i in range(refl.n):
        h, k, l = (int(v) for v in refl.hkl[i])
        lines.append(
            f"{h} {k} {l} {float(refl.f_obs[i])!r} {float(refl.sigma[i])!r} {int(refl.free_flag[i])}"
        )
    return ("\n".join(lines) + "\n").encode("ascii")


def read_reflection_text(data) -> ReflectionSet:
    if isinstance(data, bytes):
        data = data.decode("ascii")
    lines = data.splitlines()
    if not lines or lines[0].strip() != REFLECTION_HEADER:
        raise ParseError(f"missing {REFLECTION_HEADER!r} header line")
    hkl, f_obs, sigma, free = [], [], [], []
    for row_no, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"expected 6 columns, got {len(fields)}", line=row_no)
        try:
            hkl.append([int(fields[0]), int(fields[1]), int(fields[2])])
            f_obs.append(float(fields[3]))
            sigma.append(float(fields[4]))
            free.append(bool(int(fields[5])))
        except ValueError as exc:
            raise ParseError(f"malformed value: {exc}", line=row_no) from None
    n = len(hkl)
    return ReflectionSet(
        hkl=np.array(hkl, int).reshape(n, 3),
        f_obs=np.array(f_obs),
        sigma=np.array(sigma),
        free_flag=np.array(free, bool),
    )


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def format_metric_record(record: dict) -> str:
    """One self-describing JSON line; non-finite floats become null."""
    return json.dumps(_jsonable(record), sort_keys=True, allow_nan=False)


def write_metrics_log(records) -> bytes:
    return ("\n".join(format_metric_record(r) for r in records) + "\n").encode("ascii") if records else b""


def read_metrics_log(data) -> list[dict]:
    if isinstance(data, bytes):
        data = data.decode("ascii")
    return [json.loads(line) for line in data.splitlines() if line.strip()]
