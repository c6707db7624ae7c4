"""Weighted rigid-body superposition (Kabsch) and RMSD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import XtalError

__all__ = ["RigidTransform", "kabsch", "apply", "rmsd"]

_ORTHO_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rotation plus translation: y = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, float).reshape(3, 3)
        trans = np.asarray(self.translation, float).reshape(3)
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-8:
            raise XtalError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-8:
            raise XtalError("rotation matrix is not proper (det != +1)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self . other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def kabsch(x, x_ref, weights=None) -> RigidTransform:
    """Transform minimizing sum_j w_j ||R x_j + t - x_ref_j||^2 over SO(3).

    The proper-rotation constraint is enforced by sign-correcting the smallest
    singular direction whenever the unconstrained optimum is a reflection.
    """
    x = np.asarray(x, float).reshape(-1, 3)
    y = np.asarray(x_ref, float).reshape(-1, 3)
    if len(x) != len(y):
        raise XtalError(f"point counts differ: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise XtalError("superposition needs at least 3 atoms")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, float)
    if len(w) != len(x):
        raise XtalError("weights length does not match atom count")
    if np.any(w < 0):
        raise XtalError("negative superposition weights")
    wsum = float(w.sum())
    if wsum <= 0.0:
        raise XtalError("superposition weights are all zero")

    cx = (w[:, None] * x).sum(axis=0) / wsum
    cy = (w[:, None] * y).sum(axis=0) / wsum
    xc = x - cx
    yc = y - cy
    cov = (w[:, None] * xc).T @ yc
    u, s, vt = np.linalg.svd(cov)
    scale = max(float(s[0]), 1e-30)
    if s[1] / scale < 1e-9:
        raise XtalError("degenerate (collinear) point configuration; rotation not unique")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    trans = cy - rot @ cx
    return RigidTransform(rot, trans)


def apply(transform: RigidTransform, x) -> np.ndarray:
    """Apply to (..., 3) row vectors."""
    return np.asarray(x, float) @ transform.rotation.T + transform.translation


def rmsd(x, y, atom_names=None, subset: str = "all") -> float:
    """RMSD after uniform-weight superposition of x onto y.

    ``subset="calpha"`` restricts to atoms named CA; this needs ``atom_names``.
    """
    x = np.asarray(x, float).reshape(-1, 3)
    y = np.asarray(y, float).reshape(-1, 3)
    if subset == "calpha":
        if atom_names is None:
            raise XtalError("calpha RMSD needs atom names")
        sel = np.array([str(n).strip().upper() == "CA" for n in atom_names])
        if not np.any(sel):
            raise XtalError("no C-alpha atoms in selection")
        x, y = x[sel], y[sel]
    elif subset != "all":
        raise XtalError(f"unknown RMSD subset {subset!r}")
    if len(x) == 0:
        raise XtalError("empty RMSD selection")
    transform = kabsch(x, y)
    delta = apply(transform, x) - y
    return float(np.sqrt(np.mean(np.sum(delta**2, axis=1))))
