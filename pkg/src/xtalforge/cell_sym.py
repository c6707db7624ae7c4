"""Unit-cell geometry, space-group symmetry operators, and per-reflection
symmetry metadata (resolution, centric flags, epsilon factors).

Operators are kept in exact rational form (integer rotations, twelfth
translations) so that group-closure checks are exact; all geometry is float.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from .errors import SymmetryError

__all__ = [
    "UnitCell",
    "SymOp",
    "SpaceGroup",
    "parse_symop",
    "resolution",
    "centric_flags",
    "epsilon_factors",
    "expand_to_p1",
    "wrap_fractional",
    "bundled_spacegroups",
]

# Snap distance used when wrapping fractional coordinates into [0, 1).
WRAP_SNAP = 1e-9


@dataclass(frozen=True)
class UnitCell:
    """Unit-cell parameters: edge lengths in Angstrom, angles in degrees."""

    a: float
    b: float
    c: float
    alpha: float = 90.0
    beta: float = 90.0
    gamma: float = 90.0

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0.0:
            raise ValueError(f"cell edges must be positive, got {(self.a, self.b, self.c)}")
        for name in ("alpha", "beta", "gamma"):
            ang = getattr(self, name)
            if not 0.0 < ang < 180.0:
                raise ValueError(f"cell angle {name}={ang} outside (0, 180)")
        ca, cb, cg = (math.cos(math.radians(x)) for x in (self.alpha, self.beta, self.gamma))
        vol_term = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
        if vol_term <= 0.0:
            raise ValueError("cell angles do not define a positive cell volume")

    @cached_property
    def orthogonalization(self) -> np.ndarray:
        """3x3 matrix turning fractional column vectors into Cartesian (A along x)."""
        ca, cb, cg = (math.cos(math.radians(x)) for x in (self.alpha, self.beta, self.gamma))
        sg = math.sin(math.radians(self.gamma))
        v = self.volume
        return np.array(
            [
                [self.a, self.b * cg, self.c * cb],
                [0.0, self.b * sg, self.c * (ca - cb * cg) / sg],
                [0.0, 0.0, v / (self.a * self.b * sg)],
            ]
        )

    @cached_property
    def fractionalization(self) -> np.ndarray:
        return np.linalg.inv(self.orthogonalization)

    @cached_property
    def volume(self) -> float:
        ca, cb, cg = (math.cos(math.radians(x)) for x in (self.alpha, self.beta, self.gamma))
        return self.a * self.b * self.c * math.sqrt(
            1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
        )

    @cached_property
    def reciprocal_metric(self) -> np.ndarray:
        """Reciprocal metric tensor G*; 1/d^2 = h^T G* h."""
        o = self.orthogonalization
        return np.linalg.inv(o.T @ o)

    def orthogonalize(self, frac) -> np.ndarray:
        """Fractional -> Cartesian for row vectors of shape (..., 3)."""
        return np.asarray(frac, float) @ self.orthogonalization.T

    def fractionalize(self, xyz) -> np.ndarray:
        """Cartesian -> fractional for row vectors of shape (..., 3)."""
        return np.asarray(xyz, float) @ self.fractionalization.T

    def resolution(self, hkl):
        return resolution(self, hkl)

    def approx_equal(self, other: "UnitCell", rel: float = 0.01) -> bool:
        mine = (self.a, self.b, self.c, self.alpha, self.beta, self.gamma)
        theirs = (other.a, other.b, other.c, other.alpha, other.beta, other.gamma)
        return all(abs(x - y) <= rel * max(abs(x), abs(y), 1.0) for x, y in zip(mine, theirs))


def resolution(cell: UnitCell, hkl):
    """d-spacing in Angstrom for one Miller index or an (n, 3) array of them."""
    h = np.asarray(hkl, float)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    if np.any(np.all(h2 == 0.0, axis=1)):
        raise ValueError("resolution is undefined for the (0,0,0) index")
    inv_d2 = np.einsum("ni,ij,nj->n", h2, cell.reciprocal_metric, h2)
    d = 1.0 / np.sqrt(inv_d2)
    return float(d[0]) if single else d


def _as_fraction_triplet(translation) -> tuple[Fraction, Fraction, Fraction]:
    out = []
    for t in translation:
        f = Fraction(t) if not isinstance(t, Fraction) else t
        f = f % 1
        if 12 % f.denominator != 0:
            raise SymmetryError(
                f"translation {f} is not a multiple of 1/12 (crystallographic translations are)"
            )
        out.append(f)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class SymOp:
    """One symmetry operation y = R x + t on fractional coordinates.

    ``rotation`` is an exact 3x3 integer matrix, ``translation`` a triple of
    Fractions with denominators dividing 12, reduced into [0, 1).
    """

    rotation: np.ndarray
    translation: tuple[Fraction, Fraction, Fraction]

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=int)
        if rot.shape != (3, 3):
            raise SymmetryError(f"rotation must be 3x3, got shape {rot.shape}")
        det = int(round(np.linalg.det(rot)))
        if det not in (1, -1):
            raise SymmetryError(f"rotation has determinant {det}, expected +1 or -1")
        rot.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", _as_fraction_triplet(self.translation))

    @classmethod
    def identity(cls) -> "SymOp":
        return cls(np.eye(3, dtype=int), (Fraction(0), Fraction(0), Fraction(0)))

    @property
    def translation_float(self) -> np.ndarray:
        return np.array([float(t) for t in self.translation])

    def apply(self, frac) -> np.ndarray:
        """Apply to fractional row vectors of shape (..., 3)."""
        return np.asarray(frac, float) @ self.rotation.T + self.translation_float

    def compose(self, other: "SymOp") -> "SymOp":
        """self after other: (self . other)(x) = self(other(x)). Exact."""
        rot = self.rotation @ other.rotation
        trans = tuple(
            sum(Fraction(int(self.rotation[i, j])) * other.translation[j] for j in range(3))
            + self.translation[i]
            for i in range(3)
        )
        return SymOp(rot, trans)

    def key(self):
        """Hashable exact identity (rotation entries, reduced translation)."""
        return (tuple(int(v) for v in self.rotation.ravel()), self.translation)

    def __eq__(self, other):
        return isinstance(other, SymOp) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def triplet(self) -> str:
        """Render back to "x,y,z" form."""
        parts = []
        for i in range(3):
            term = ""
            for j, letter in enumerate("xyz"):
                coef = int(self.rotation[i, j])
                if coef == 0:
                    continue
                sign = "-" if coef < 0 else ("+" if term else "")
                body = letter if abs(coef) == 1 else f"{abs(coef)}{letter}"
                term += sign + body
            t = self.translation[i]
            if t != 0:
                term += f"+{t.numerator}/{t.denominator}" if term else f"{t.numerator}/{t.denominator}"
            parts.append(term or "0")
        return ",".join(parts)

    def __repr__(self):
        return f"SymOp({self.triplet()!r})"


_TOKEN = re.compile(r"([+-]?)(\d+/\d+|\d+|[xyz])")


def parse_symop(text: str) -> SymOp:
    """Parse an operator triplet such as "-y, x-y, z+1/3".

    Grammar per coordinate: term (+-term)*, terms being x, y, z, an integer,
    or a fraction n/m. Whitespace is ignored and case does not matter.
    """
    parts = text.split(",")
    if len(parts) != 3:
        raise SymmetryError(f"expected 3 comma-separated components in {text!r}, got {len(parts)}")
    rot = np.zeros((3, 3), dtype=int)
    trans = [Fraction(0), Fraction(0), Fraction(0)]
    for i, raw in enumerate(parts):
        comp = re.sub(r"\s+", "", raw).lower()
        if not comp:
            raise SymmetryError(f"empty component {i + 1} in {text!r}")
        pos = 0
        first = True
        while pos < len(comp):
            m = _TOKEN.match(comp, pos)
            if m is None:
                raise SymmetryError(f"unrecognized token {comp[pos:]!r} in {text!r}")
            sign_str, body = m.groups()
            if not first and not sign_str:
                raise SymmetryError(f"missing +/- before token {body!r} in {text!r}")
            sign = -1 if sign_str == "-" else 1
            if body in ("x", "y", "z"):
                rot[i, "xyz".index(body)] += sign
            elif "/" in body:
                num, den = body.split("/")
                if int(den) == 0:
                    raise SymmetryError(f"zero denominator in token {body!r} in {text!r}")
                trans[i] += sign * Fraction(int(num), int(den))
            else:
                trans[i] += sign * Fraction(int(body))
            pos = m.end()
            first = False
    det = int(round(np.linalg.det(rot)))
    if det not in (1, -1):
        raise SymmetryError(f"rotation part of {text!r} is not invertible (det={det})")
    return SymOp(rot, tuple(trans))


@dataclass(frozen=True, eq=False)
class SpaceGroup:
    """A named list of symmetry operations (must contain the identity)."""

    name: str
    ops: tuple[SymOp, ...]

    def __post_init__(self):
        ops = tuple(self.ops)
        if not ops:
            raise SymmetryError("space group needs at least one operation")
        if SymOp.identity() not in ops:
            raise SymmetryError(f"space group {self.name!r} does not contain the identity")
        object.__setattr__(self, "ops", ops)

    @classmethod
    def from_triplets(cls, name: str, triplets) -> "SpaceGroup":
        return cls(name, tuple(parse_symop(t) for t in triplets))

    @classmethod
    def from_symbol(cls, symbol: str) -> "SpaceGroup":
        key = _normalize_symbol(symbol)
        try:
            triplets = _BUNDLED_TRIPLETS[_ALIASES[key]]
        except KeyError:
            raise SymmetryError(
                f"space group {symbol!r} is not in the bundled table "
                f"(have: {', '.join(sorted(_BUNDLED_TRIPLETS))}); "
                "supply operators from the input file instead"
            ) from None
        return cls.from_triplets(symbol.strip(), triplets)

    @classmethod
    def from_ops(cls, name: str, ops) -> "SpaceGroup":
        return cls(name, tuple(ops))

    @property
    def n_ops(self) -> int:
        return len(self.ops)

    @cached_property
    def rotations(self) -> np.ndarray:
        """All rotation matrices stacked into an (n_ops, 3, 3) int array."""
        return np.stack([op.rotation for op in self.ops])

    @cached_property
    def translations(self) -> np.ndarray:
        return np.stack([op.translation_float for op in self.ops])

    def is_closed(self) -> bool:
        """True when pairwise composition stays inside the group (mod lattice)."""
        members = {op.key() for op in self.ops}
        return all((a.compose(b)).key() in members for a in self.ops for b in self.ops)


# Triplets for the common macromolecular groups this package bundles.  Any
# other group can be loaded from file records via SpaceGroup.from_triplets.
_BUNDLED_TRIPLETS = {
    "P1": ["x,y,z"],
    "P-1": ["x,y,z", "-x,-y,-z"],
    "P2": ["x,y,z", "-x,y,-z"],
    "P21": ["x,y,z", "-x,y+1/2,-z"],
    "C2": ["x,y,z", "-x,y,-z", "x+1/2,y+1/2,z", "-x+1/2,y+1/2,-z"],
    "P212121": [
        "x,y,z",
        "x+1/2,-y+1/2,-z",
        "-x,y+1/2,-z+1/2",
        "-x+1/2,-y,z+1/2",
    ],
    "P43212": [
        "x,y,z",
        "-x,-y,z+1/2",
        "-y+1/2,x+1/2,z+3/4",
        "y+1/2,-x+1/2,z+1/4",
        "-x+1/2,y+1/2,-z+3/4",
        "x+1/2,-y+1/2,-z+1/4",
        "y,x,-z",
        "-y,-x,-z+1/2",
    ],
}

_ALIASES = {
    "P1": "P1",
    "P-1": "P-1",
    "P2": "P2",
    "P121": "P2",
    "P21": "P21",
    "P1211": "P21",
    "C2": "C2",
    "C121": "C2",
    "P212121": "P212121",
    "P43212": "P43212",
}


def _normalize_symbol(symbol: str) -> str:
    return symbol.strip().upper().replace(" ", "")


def bundled_spacegroups() -> list[str]:
    return sorted(_BUNDLED_TRIPLETS)


def centric_flags(sg: SpaceGroup, hkls) -> np.ndarray:
    """True where some rotation R satisfies R^T h = -h."""
    h = np.atleast_2d(np.asarray(hkls, int))
    flags = np.zeros(len(h), dtype=bool)
    for rot in sg.rotations:
        flags |= np.all(h @ rot == -h, axis=1)
    return flags


def epsilon_factors(sg: SpaceGroup, hkls) -> np.ndarray:
    """Number of operations whose rotation fixes h (R^T h = h); always >= 1."""
    h = np.atleast_2d(np.asarray(hkls, int))
    eps = np.zeros(len(h), dtype=int)
    for rot in sg.rotations:
        eps += np.all(h @ rot == h, axis=1)
    return eps


def wrap_fractional(frac, snap: float = WRAP_SNAP) -> np.ndarray:
    """Wrap fractional coordinates into [0, 1), snapping 1-epsilon back to 0."""
    w = np.asarray(frac, float) % 1.0
    w[w > 1.0 - snap] = 0.0
    return w


def expand_positions(frac, sg: SpaceGroup) -> np.ndarray:
    """Apply every operation to (n, 3) fractional rows; returns (n_ops * n, 3)."""
    frac = np.atleast_2d(np.asarray(frac, float))
    images = [wrap_fractional(op.apply(frac)) for op in sg.ops]
    return np.concatenate(images, axis=0)


def expand_to_p1(model, sg: SpaceGroup):
    """Replicate a model over all symmetry operations, in fractional space.

    The result has input_count * n_ops atoms with coordinates wrapped into
    [0, 1); occupancies, B-factors and metadata are copied per image.
    """
    from .io_formats.types import AtomicModel

    if model.cell is None:
        raise ValueError("expand_to_p1 needs a model with an attached unit cell")
    frac = expand_positions(model.frac, sg)
    xyz = model.cell.orthogonalize(frac)
    n = sg.n_ops
    return AtomicModel(
        element=np.tile(model.element, n),
        xyz=xyz,
        occupancy=np.tile(model.occupancy, n),
        b_iso=np.tile(model.b_iso, n),
        atom_name=np.tile(model.atom_name, n),
        resname=np.tile(model.resname, n),
        chain=np.tile(model.chain, n),
        resseq=np.tile(model.resseq, n),
        icode=np.tile(model.icode, n),
        altloc=np.tile(model.altloc, n),
        cell=model.cell,
    )
