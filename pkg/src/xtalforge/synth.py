"""Deterministic synthetic crystals for generate-then-recover experiments.

Amplitudes are produced by the same forward model the rest of the package
uses; that circularity is deliberate (parser and geometry behavior have
independent oracles in the test suite, recovery tests are generate-then-
recover by design).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell_sym import SpaceGroup, UnitCell, resolution
from .errors import XtalError
from .forward import ForwardConfig, ScaledForward
from .io_formats.types import AtomicModel, ReflectionSet
from .scatter import ScatteringTable

__all__ = ["SynthSpec", "SynthBundle", "hkl_sphere", "generate"]


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic crystal."""

    cell: UnitCell = field(default_factory=lambda: UnitCell(12.0, 12.0, 12.0))
    spacegroup: str = "P1"
    n_atoms: int = 20
    d_min: float = 1.5
    seed: int = 0
    noise: float = 0.0
    sigma_frac: float | None = None     # sigma column as a fraction of RMS|F|; defaults to noise
    free_fraction: float = 0.05
    b_mode: str = "uniform"             # uniform | hetero
    b_value: float = 15.0
    min_separation: float = 1.5
    elements: tuple = ("C", "N", "O", "S")
    use_solvent: bool = False
    k_total: float = 1.0
    k_mask: float = 0.0


@dataclass
class SynthBundle:
    model: AtomicModel
    refl: ReflectionSet
    spacegroup: SpaceGroup
    truth: dict


def hkl_sphere(cell: UnitCell, d_min: float) -> np.ndarray:
    """Friedel-unique Miller indices with d >= d_min (half sphere, no (0,0,0))."""
    bounds = [int(np.ceil(length / d_min)) for length in (cell.a, cell.b, cell.c)]
    h, k, l = np.meshgrid(
        np.arange(-bounds[0], bounds[0] + 1),
        np.arange(-bounds[1], bounds[1] + 1),
        np.arange(-bounds[2], bounds[2] + 1),
        indexing="ij",
    )
    hkl = np.stack([h.ravel(), k.ravel(), l.ravel()], axis=1)
    nonzero = ~np.all(hkl == 0, axis=1)
    hkl = hkl[nonzero]
    half = (hkl[:, 0] > 0) | ((hkl[:, 0] == 0) & (hkl[:, 1] > 0)) | (
        (hkl[:, 0] == 0) & (hkl[:, 1] == 0) & (hkl[:, 2] > 0)
    )
    hkl = hkl[half]
    d = resolution(cell, hkl)
    hkl = hkl[d >= d_min]
    order = np.lexsort((hkl[:, 2], hkl[:, 1], hkl[:, 0]))
    return hkl[order]


def _random_positions(rng, spec: SynthSpec) -> np.ndarray:
    """Fractional positions with a periodic minimum-separation constraint."""
    ortho = spec.cell.orthogonalization
    placed: list = []
    attempts = 0
    while len(placed) < spec.n_atoms:
        attempts += 1
        if attempts > 20000:
            raise XtalError(
                f"cannot place {spec.n_atoms} atoms {spec.min_separation} A apart in this cell"
            )
        cand = rng.random(3)
        ok = True
        for prev in placed:
            delta = ((cand - prev + 0.5) % 1.0) - 0.5
            if np.linalg.norm(ortho @ delta) < spec.min_separation:
                ok = False
                break
        if ok:
            placed.append(cand)
    return np.asarray(placed)


def generate(spec: SynthSpec) -> SynthBundle:
    """Build (model, reflections, truth record); identical specs give
    identical bundles."""
    rng = np.random.default_rng(spec.seed)
    sg = SpaceGroup.from_symbol(spec.spacegroup)
    frac = _random_positions(rng, spec)
    elements = rng.choice(np.asarray(spec.elements, dtype=object), size=spec.n_atoms)
    if spec.b_mode == "uniform":
        b_iso = np.full(spec.n_atoms, spec.b_value)
    elif spec.b_mode == "hetero":
        b_iso = rng.uniform(5.0, 40.0, size=spec.n_atoms)
    else:
        raise XtalError(f"unknown b_mode {spec.b_mode!r}")
    model = AtomicModel.build(
        element=elements,
        xyz=spec.cell.orthogonalize(frac),
        b_iso=b_iso,
        cell=spec.cell,
    )

    hkl = hkl_sphere(spec.cell, spec.d_min)
    if len(hkl) == 0:
        raise XtalError("no reflections inside the requested resolution limit")
    free = rng.random(len(hkl)) < spec.free_fraction
    refl0 = ReflectionSet(
        hkl=hkl,
        f_obs=np.zeros(len(hkl)),
        sigma=np.zeros(len(hkl)),
        free_flag=free,
    ).with_metadata(spec.cell, sg)

    fwd = ScaledForward(
        spec.cell, sg, refl0, ScatteringTable.default(),
        ForwardConfig(use_solvent=spec.use_solvent),
    )
    fwd.set_constant_scales(spec.k_total, spec.k_mask)
    if spec.use_solvent:
        fwd.rebuild_solvent(model)
    amp, _ = fwd.amplitudes(model)

    rms = float(np.sqrt(np.mean(amp**2)))
    f_obs = amp.copy()
    if spec.noise > 0.0:
        f_obs = np.maximum(f_obs + spec.noise * rms * rng.standard_normal(len(f_obs)), 0.0)
    sigma_frac = spec.noise if spec.sigma_frac is None else spec.sigma_frac
    sigma = np.full(len(f_obs), sigma_frac * rms)

    from dataclasses import replace

    refl = replace(refl0, f_obs=f_obs, sigma=sigma)
    truth = {
        "cell": [spec.cell.a, spec.cell.b, spec.cell.c, spec.cell.alpha, spec.cell.beta, spec.cell.gamma],
        "spacegroup": spec.spacegroup,
        "n_atoms": spec.n_atoms,
        "d_min": spec.d_min,
        "seed": spec.seed,
        "noise": spec.noise,
        "sigma_frac": sigma_frac,
        "n_reflections": int(len(hkl)),
        "n_free": int(free.sum()),
        "rms_f": rms,
        "k_total": spec.k_total,
        "k_mask": spec.k_mask,
        "use_solvent": spec.use_solvent,
    }
    return SynthBundle(model=model, refl=refl, spacegroup=sg, truth=truth)
