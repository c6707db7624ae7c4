"""Atomic scattering factors (four-Gaussian fits) and isotropic Debye-Waller
attenuation.

Coefficients ship for the elements that occur in protein crystals plus the
common ions; both bundled data files are checksum-pinned so silent edits fail
loudly at load time.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import XtalError

__all__ = [
    "ScatteringTable",
    "form_factor",
    "dwf_iso",
    "dwf_iso_grad_b",
    "load_vdw_radii",
    "ELECTRON_COUNTS",
]

_CM_SHA256 = "2ab908dac6a3ea275e87beb0d95b4738f57545a6517b1b9ecd018094587ffb0a"
_VDW_SHA256 = "46b6ec41bcfefb1b33e5063728be011088b1546901d721e66c5a8971f098b024"

ELECTRON_COUNTS = {
    "H": 1, "C": 6, "N": 7, "O": 8, "NA": 11, "MG": 12,
    "P": 15, "S": 16, "CL": 17, "CA": 20, "FE": 26, "ZN": 30,
}


def _read_pinned(name: str, expected_sha: str) -> str:
    raw = (resources.files("xtalforge") / "data" / name).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != expected_sha:
        raise XtalError(
            f"bundled data file {name} has checksum {digest}, expected {expected_sha}; "
            "refusing to load a modified table"
        )
    return raw.decode("ascii")


@dataclass(frozen=True)
class ScatteringTable:
    """Per-element (a[4], b[4], c) coefficients of the four-Gaussian fit."""

    coefficients: dict

    @classmethod
    def from_text(cls, text: str) -> "ScatteringTable":
        coeffs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 10:
                raise XtalError(f"scattering table line {lineno}: expected 10 fields, got {len(fields)}")
            symbol = fields[0].upper()
            values = [float(v) for v in fields[1:]]
            a = np.array(values[0:8:2])
            b = np.array(values[1:8:2])
            coeffs[symbol] = (a, b, values[8])
        return cls(coeffs)

    @classmethod
    def default(cls) -> "ScatteringTable":
        global _DEFAULT
        if _DEFAULT is None:
            _DEFAULT = cls.from_text(_read_pinned("cromer_mann.txt", _CM_SHA256))
        return _DEFAULT

    def elements(self) -> list[str]:
        return sorted(self.coefficients)

    def __contains__(self, element: str) -> bool:
        return element.upper() in self.coefficients


_DEFAULT = None
_VDW = None


def form_factor(table: ScatteringTable, element: str, s) -> np.ndarray:
    """f(s) in electrons at s = sin(theta)/lambda = 1/(2d), vectorized over s."""
    try:
        a, b, c = table.coefficients[element.upper()]
    except KeyError:
        raise XtalError(
            f"no scattering coefficients for element {element!r}; "
            f"supported: {', '.join(table.elements())}"
        ) from None
    s2 = np.square(np.asarray(s, float))
    return np.exp(-np.multiply.outer(s2, b)) @ a + c


def dwf_iso(b, s):
    """Isotropic Debye-Waller factor exp(-B s^2) = exp(-B / (4 d^2))."""
    return np.exp(-np.asarray(b, float) * np.square(np.asarray(s, float)))


def dwf_iso_grad_b(b, s):
    """Analytic d/dB of dwf_iso."""
    s2 = np.square(np.asarray(s, float))
    return -s2 * np.exp(-np.asarray(b, float) * s2)


def load_vdw_radii() -> dict:
    """Van der Waals radii (Angstrom) per element symbol, checksum-verified."""
    global _VDW
    if _VDW is None:
        radii = {}
        for line in _read_pinned("vdw_radii.txt", _VDW_SHA256).splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            symbol, value = line.split()
            radii[symbol.upper()] = float(value)
        _VDW = radii
    return dict(_VDW)
