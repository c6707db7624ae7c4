"""Core data carriers: reflection sets and atomic models."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from ..cell_sym import SpaceGroup, UnitCell, centric_flags, epsilon_factors, resolution
from ..errors import XtalError

__all__ = ["ReflectionSet", "AtomicModel", "assign_resolution_bins"]


def _frozen_array(values, dtype=None):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def assign_resolution_bins(d, working, n_bins: int, min_per_bin: int):
    """Log-spaced resolution bins over d, merged so that every bin keeps at
    least ``min_per_bin`` working reflections.

    Bin 0 is the lowest-resolution (largest d) shell. Returns (bin_id, n_eff).
    """
    d = np.asarray(d, float)
    logd = np.log(d)
    lo, hi = float(logd.min()), float(logd.max())
    if hi - lo < 1e-12 or n_bins <= 1:
        return np.zeros(len(d), dtype=int), 1
    frac = (hi - logd) / (hi - lo)
    raw = np.minimum((frac * n_bins).astype(int), n_bins - 1)

    counts = np.bincount(raw[np.asarray(working, bool)], minlength=n_bins)
    mapping = np.zeros(n_bins, dtype=int)
    cur = 0
    acc = 0
    for b in range(n_bins):
        mapping[b] = cur
        acc += int(counts[b])
        if acc >= min_per_bin:
            cur += 1
            acc = 0
    if acc > 0 and cur > 0:
        # trailing underfull group: merge it into the previous bin
        mapping[mapping == cur] = cur - 1
        n_eff = cur
    else:
        n_eff = max(cur, 1)
    return mapping[raw], n_eff


@dataclass(frozen=True, eq=False)
class ReflectionSet:
    """Observed reflections plus (optionally) derived symmetry metadata.

    ``f_obs`` is on an arbitrary experimental scale; ``free_flag`` marks the
    held-out set. ``d``, ``centric``, ``epsilon`` and ``bin_id`` appear once
    :meth:`with_metadata` has been called with a cell and space group.
    """

    hkl: np.ndarray
    f_obs: np.ndarray
    sigma: np.ndarray
    free_flag: np.ndarray
    d: np.ndarray | None = None
    centric: np.ndarray | None = None
    epsilon: np.ndarray | None = None
    bin_id: np.ndarray | None = None
    n_bins: int = 0

    def __post_init__(self):
        hkl = _frozen_array(self.hkl, int).reshape(-1, 3)
        f_obs = _frozen_array(self.f_obs, float)
        sigma = _frozen_array(self.sigma, float)
        free = _frozen_array(self.free_flag, bool)
        n = len(hkl)
        if not (len(f_obs) == len(sigma) == len(free) == n):
            raise XtalError("reflection arrays have mismatched lengths")
        if n and np.any(np.all(hkl == 0, axis=1)):
            raise XtalError("reflection set contains the (0,0,0) index")
        if np.any(f_obs < 0):
            raise XtalError("negative amplitude in reflection set")
        if np.any(sigma < 0):
            raise XtalError("negative sigma in reflection set")
        if n:
            uniq = np.unique(hkl, axis=0)
            if len(uniq) != n:
                raise XtalError("duplicate Miller indices in reflection set")
        object.__setattr__(self, "hkl", hkl)
        object.__setattr__(self, "f_obs", f_obs)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "free_flag", free)
        for name in ("d", "centric", "epsilon", "bin_id"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen_array(val))

    def __len__(self):
        return len(self.hkl)

    @property
    def n(self) -> int:
        return len(self.hkl)

    @cached_property
    def working(self) -> np.ndarray:
        w = ~self.free_flag
        w.setflags(write=False)
        return w

    @property
    def has_metadata(self) -> bool:
        return self.bin_id is not None

    def require_metadata(self) -> "ReflectionSet":
        if not self.has_metadata:
            raise XtalError("reflection metadata missing; call with_metadata(cell, sg) first")
        return self

    def with_metadata(self, cell: UnitCell, sg: SpaceGroup, n_bins: int = 10,
                      min_per_bin: int = 10) -> "ReflectionSet":
        """Attach d-spacings, centric flags, epsilon factors and resolution bins."""
        d = resolution(cell, self.hkl)
        cen = centric_flags(sg, self.hkl)
        eps = epsilon_factors(sg, self.hkl)
        bin_id, n_eff = assign_resolution_bins(d, ~self.free_flag, n_bins, min_per_bin)
        return replace(self, d=d, centric=cen, epsilon=eps, bin_id=bin_id, n_bins=n_eff)

    def select(self, mask) -> "ReflectionSet":
        mask = np.asarray(mask, bool)
        kw = {}
        for name in ("d", "centric", "epsilon", "bin_id"):
            val = getattr(self, name)
            kw[name] = None if val is None else val[mask]
        return ReflectionSet(
            hkl=self.hkl[mask], f_obs=self.f_obs[mask], sigma=self.sigma[mask],
            free_flag=self.free_flag[mask], n_bins=self.n_bins, **kw,
        )

    def free_set_hash(self) -> str:
        """Digest of the sorted free hkl set; pipeline stages must preserve it."""
        free = self.hkl[self.free_flag]
        order = np.lexsort((free[:, 2], free[:, 1], free[:, 0])) if len(free) else []
        return hashlib.sha256(np.ascontiguousarray(free[order]).tobytes()).hexdigest()


_DEF = object()


@dataclass(frozen=True, eq=False)
class AtomicModel:
    """Atoms with element, Cartesian coordinates, occupancy and isotropic B.

    Chain/residue/name metadata is carried verbatim so PDB output round-trips.
    """

    element: np.ndarray
    xyz: np.ndarray
    occupancy: np.ndarray
    b_iso: np.ndarray
    atom_name: np.ndarray
    resname: np.ndarray
    chain: np.ndarray
    resseq: np.ndarray
    icode: np.ndarray
    altloc: np.ndarray
    cell: UnitCell | None = None

    def __post_init__(self):
        xyz = _frozen_array(self.xyz, float).reshape(-1, 3)
        n = len(xyz)
        occ = _frozen_array(self.occupancy, float)
        b = _frozen_array(self.b_iso, float)
        if np.any((occ < 0) | (occ > 1)):
            raise XtalError("occupancy outside [0, 1]")
        if np.any(b <= 0):
            raise XtalError("non-positive isotropic B-factor")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "b_iso", b)
        for name, dtype in (("element", None), ("atom_name", None), ("resname", None),
                            ("chain", None), ("resseq", int), ("icode", None), ("altloc", None)):
            arr = _frozen_array(getattr(self, name), dtype)
            if len(arr) != n:
                raise XtalError(f"model field {name} has length {len(arr)}, expected {n}")
            object.__setattr__(self, name, arr)

    @classmethod
    def build(cls, element, xyz, occupancy=None, b_iso=None, cell=None) -> "AtomicModel":
        """Convenience constructor filling in placeholder residue metadata."""
        element = np.asarray(element, dtype=object)
        n = len(element)
        return cls(
            element=np.array([str(e).upper() for e in element]),
            xyz=np.asarray(xyz, float),
            occupancy=np.ones(n) if occupancy is None else occupancy,
            b_iso=np.full(n, 20.0) if b_iso is None else b_iso,
            atom_name=np.array([f"{str(e).upper():>2s}{i + 1:<2d}"[:4] for i, e in enumerate(element)]),
            resname=np.full(n, "UNK"),
            chain=np.full(n, "A"),
            resseq=np.arange(1, n + 1),
            icode=np.full(n, " "),
            altloc=np.full(n, " "),
            cell=cell,
        )

    def __len__(self):
        return len(self.xyz)

    @property
    def n_atoms(self) -> int:
        return len(self.xyz)

    @cached_property
    def frac(self) -> np.ndarray:
        if self.cell is None:
            raise XtalError("model has no unit cell attached; fractional coordinates undefined")
        f = self.cell.fractionalize(self.xyz)
        f.setflags(write=False)
        return f

    @cached_property
    def calpha_mask(self) -> np.ndarray:
        return np.array([name.strip().upper() == "CA" for name in self.atom_name])

    @cached_property
    def residue_index(self) -> np.ndarray:
        """Index of each atom's residue, in order of first appearance."""
        seen = {}
        idx = np.empty(self.n_atoms, dtype=int)
        for i in range(self.n_atoms):
            key = (str(self.chain[i]), int(self.resseq[i]), str(self.icode[i]))
            idx[i] = seen.setdefault(key, len(seen))
        return idx

    def _replace(self, **kw) -> "AtomicModel":
        fields = dict(
            element=self.element, xyz=self.xyz, occupancy=self.occupancy, b_iso=self.b_iso,
            atom_name=self.atom_name, resname=self.resname, chain=self.chain,
            resseq=self.resseq, icode=self.icode, altloc=self.altloc, cell=self.cell,
        )
        fields.update(kw)
        return AtomicModel(**fields)

    def with_xyz(self, xyz) -> "AtomicModel":
        return self._replace(xyz=np.asarray(xyz, float))

    def with_b(self, b_iso) -> "AtomicModel":
        return self._replace(b_iso=np.asarray(b_iso, float))

    def with_cell(self, cell: UnitCell | None) -> "AtomicModel":
        return self._replace(cell=cell)

    def subset(self, mask) -> "AtomicModel":
        mask = np.asarray(mask, bool)
        return AtomicModel(
            element=self.element[mask], xyz=self.xyz[mask], occupancy=self.occupancy[mask],
            b_iso=self.b_iso[mask], atom_name=self.atom_name[mask], resname=self.resname[mask],
            chain=self.chain[mask], resseq=self.resseq[mask], icode=self.icode[mask],
            altloc=self.altloc[mask], cell=self.cell,
        )
