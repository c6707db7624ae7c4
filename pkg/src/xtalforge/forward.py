"""Differentiable crystallographic forward model.

Protein structure factors by direct summation over atoms and symmetry images,
FFT-based bulk-solvent structure factors over a binary mask, per-bin scaling
with an anisotropic overall envelope, and analytic gradients of any scalar
amplitude loss with respect to coordinates and isotropic B-factors.

Reductions use fixed-order summation (no BLAS accumulation over large
contraction axes), so results do not depend on thread-count settings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .cell_sym import SpaceGroup, UnitCell, expand_positions, resolution
from .errors import XtalError
from .likelihood import pearson_cc, r_factor
from .scatter import ScatteringTable, form_factor, load_vdw_radii

log = logging.getLogger(__name__)

__all__ = [
    "ForwardConfig",
    "SolventGrid",
    "StructureFactorState",
    "f_protein",
    "solvent_mask",
    "f_solvent",
    "scale_and_combine",
    "solve_scales",
    "loss_gradients",
    "scattering_vectors",
    "ScaledForward",
]

_TWO_PI = 2.0 * np.pi
_AMP_TINY = 1e-30


@dataclass(frozen=True)
class ForwardConfig:
    """Bulk-solvent and scaling parameters.

    The default grid spacing is d_min / 4 capped at ``spacing_cap``; probe and
    shrink radii follow conventional refinement defaults.
    """

    use_solvent: bool = True
    grid_spacing: float | None = None
    spacing_cap: float = 0.6
    r_probe: float = 1.0
    r_shrink: float = 0.9
    kmask_step: float = 0.02
    max_grid_points: int = 16_777_216
    chunk: int = 512


@dataclass(frozen=True, eq=False)
class SolventGrid:
    """Binary solvent occupancy on a unit-cell grid (1 = solvent)."""

    values: np.ndarray
    cell: UnitCell
    spacing: float

    @property
    def dims(self):
        return self.values.shape

    @property
    def solvent_fraction(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True, eq=False)
class StructureFactorState:
    """Everything needed to turn F_protein into scaled model amplitudes."""

    f_protein: np.ndarray
    f_solvent: np.ndarray
    k_total: np.ndarray
    k_mask: np.ndarray
    u_aniso: np.ndarray


def scattering_vectors(cell: UnitCell, hkl) -> np.ndarray:
    """Scattering vectors in an orthonormal reciprocal basis; |s| = 1/d."""
    return np.asarray(hkl, float) @ cell.fractionalization


def _atom_coefficients(model, table, s_mag_chunk, s2_chunk):
    """(n_chunk, n_atoms) per-atom amplitudes f_j(s) * occ_j * exp(-B_j s^2)."""
    elements = model.element
    unique = sorted(set(elements.tolist()))
    elem_idx = np.array([unique.index(e) for e in elements])
    f_el = np.stack([form_factor(table, el, s_mag_chunk) for el in unique], axis=1)
    coeff = f_el[:, elem_idx] * model.occupancy[None, :]
    coeff *= np.exp(-np.multiply.outer(s2_chunk, model.b_iso))
    return coeff


def f_protein(model, cell: UnitCell, sg: SpaceGroup, refl, table: ScatteringTable,
              chunk: int = 512) -> np.ndarray:
    """F(h) = sum_G sum_j f_j(s) O_j exp(-B_j s^2) exp(-2 pi i h . G(x_j)).

    Summation order is fixed (symmetry images outer, atoms inner), so the
    result is independent of any parallel execution of the caller.
    """
    hkl = np.asarray(refl.hkl if hasattr(refl, "hkl") else refl, int)
    d = resolution(cell, hkl)
    s_mag = 0.5 / d
    s2 = s_mag**2
    frac = model.frac
    n = len(hkl)
    out = np.zeros(n, dtype=complex)
    hrots = [hkl @ op.rotation for op in sg.ops]
    tphases = [np.exp(_TWO_PI * 1j * (hkl @ op.translation_float)) for op in sg.ops]
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        coeff = _atom_coefficients(model, table, s_mag[sl], s2[sl])
        acc = np.zeros(sl.stop - sl.start, dtype=complex)
        for hrot, tphase in zip(hrots, tphases):
            phase = np.exp(_TWO_PI * 1j * (hrot[sl] @ frac.T))
            acc += tphase[sl] * np.sum(coeff * phase, axis=1)
        out[sl] = acc
    return out


def _sphere_offsets(cell: UnitCell, dims, radius: float):
    """Integer grid shifts whose Cartesian displacement is within radius."""
    frac_half = radius * np.linalg.norm(cell.fractionalization, axis=1)
    bounds = [min(int(np.ceil(frac_half[i] * dims[i])) + 1, dims[i] // 2) for i in range(3)]
    shifts = []
    ortho = cell.orthogonalization
    for dx in range(-bounds[0], bounds[0] + 1):
        for dy in range(-bounds[1], bounds[1] + 1):
            for dz in range(-bounds[2], bounds[2] + 1):
                step = ortho @ (np.array([dx, dy, dz]) / np.asarray(dims, float))
                if np.dot(step, step) <= radius**2:
                    shifts.append((dx, dy, dz))
    return shifts


def solvent_mask(model, cell: UnitCell, sg: SpaceGroup, spacing: float,
                 config: ForwardConfig | None = None) -> SolventGrid:
    """Binary bulk-solvent mask on a grid with spacing <= ``spacing``.

    A point is protein when within (r_vdw + r_probe) of any symmetry-expanded
    atom; a shrink pass then returns to solvent every protein point within
    r_shrink of the probe-expanded solvent region, recovering crevices.
    """
    config = config or ForwardConfig()
    if spacing <= 0.0:
        raise ValueError("grid spacing must be positive")
    dims = tuple(max(int(np.ceil(length / spacing)), 4) for length in (cell.a, cell.b, cell.c))
    n_points = dims[0] * dims[1] * dims[2]
    if n_points > config.max_grid_points:
        raise XtalError(
            f"solvent grid {dims} has {n_points} points, over the cap of "
            f"{config.max_grid_points}; use a coarser spacing"
        )
    protein = np.zeros(dims, dtype=bool)
    if model.n_atoms:
        radii = load_vdw_radii()
        frac_all = expand_positions(model.frac, sg)
        elements_all = np.tile(model.element, sg.n_ops)
        frow = np.linalg.norm(cell.fractionalization, axis=1)
        ortho_cols = cell.orthogonalization
        axes_idx = [np.arange(dims[i]) for i in range(3)]
        for pos, element in zip(frac_all, elements_all):
            try:
                r = radii[str(element).upper()] + config.r_probe
            except KeyError:
                raise XtalError(f"no van der Waals radius for element {element!r}") from None
            deltas = []
            index_lists = []
            for i in range(3):
                hw = r * frow[i]
                lo = int(np.floor((pos[i] - hw) * dims[i]))
                hi = int(np.ceil((pos[i] + hw) * dims[i]))
                span = min(hi - lo + 1, dims[i])
                idx = (lo + np.arange(span)) % dims[i]
                df = ((idx / dims[i] - pos[i] + 0.5) % 1.0) - 0.5
                deltas.append(df)
                index_lists.append(idx)
            dvec = (
                np.multiply.outer(deltas[0], ortho_cols[:, 0])[:, None, None, :]
                + np.multiply.outer(deltas[1], ortho_cols[:, 1])[None, :, None, :]
                + np.multiply.outer(deltas[2], ortho_cols[:, 2])[None, None, :, :]
            )
            inside = np.sum(dvec**2, axis=-1) <= r**2
            block = np.ix_(*index_lists)
            protein[block] = protein[block] | inside
        if config.r_shrink > 0.0 and protein.any():
            solvent_seed = ~protein
            near_solvent = np.zeros(dims, dtype=bool)
            for shift in _sphere_offsets(cell, dims, config.r_shrink):
                near_solvent |= np.roll(solvent_seed, shift, axis=(0, 1, 2))
            protein &= ~near_solvent
    return SolventGrid(values=(~protein).astype(np.uint8), cell=cell, spacing=spacing)


def f_solvent(grid: SolventGrid, refl) -> np.ndarray:
    """F_solvent(h) = (V/N) sum_grid mask * exp(+2 pi i h . r_frac), via FFT."""
    hkl = np.asarray(refl.hkl if hasattr(refl, "hkl") else refl, int)
    dims = grid.dims
    for i in range(3):
        if np.max(np.abs(hkl[:, i])) > (dims[i] - 1) // 2:
            raise XtalError(
                f"Miller index range exceeds grid Nyquist limit along axis {i} "
                f"(grid {dims[i]}, max |h| {int(np.max(np.abs(hkl[:, i])))})"
            )
    transform = np.fft.ifftn(grid.values.astype(float)) * grid.cell.volume
    idx = hkl % np.asarray(dims)
    return transform[idx[:, 0], idx[:, 1], idx[:, 2]]


def _aniso_envelope(cell: UnitCell, hkl, u_aniso) -> np.ndarray:
    s = scattering_vectors(cell, hkl)
    return np.exp(-2.0 * np.pi**2 * np.einsum("ni,ij,nj->n", s, np.asarray(u_aniso, float), s))


def scale_and_combine(state: StructureFactorState, refl, cell: UnitCell) -> np.ndarray:
    """|F_c| = k_total[bin] * exp(-2 pi^2 s.U.s) * |F_protein + k_mask[bin] F_solvent|."""
    refl.require_metadata()
    env = _aniso_envelope(cell, refl.hkl, state.u_aniso)
    combined = state.f_protein + state.k_mask[refl.bin_id] * state.f_solvent
    return state.k_total[refl.bin_id] * env * np.abs(combined)


def solve_scales(f_protein_arr, f_solvent_arr, refl, config: ForwardConfig | None = None,
                 incumbent=None):
    """Per-bin (k_total, k_mask) minimizing the bin R factor.

    k_mask is scanned over [0, 1] in steps of ``kmask_step``; for each
    candidate, k_total is the closed-form least-squares scale. Only working
    reflections participate. When ``incumbent`` scales are given they join the
    scan, so a re-solve can never increase the working R factor.
    """
    refl.require_metadata()
    config = config or ForwardConfig()
    n_bins = max(int(refl.n_bins), 1)
    k_total = np.zeros(n_bins)
    k_mask = np.zeros(n_bins)
    kms = np.arange(0.0, 1.0 + config.kmask_step / 2.0, config.kmask_step)
    for b in range(n_bins):
        sel = refl.working & (refl.bin_id == b)
        if not np.any(sel):
            log.warning("scale solve: bin %d has no working reflections", b)
            continue
        fo = refl.f_obs[sel]
        sum_fo = float(fo.sum())
        if sum_fo <= 0.0:
            continue
        fp = f_protein_arr[sel]
        fs = f_solvent_arr[sel]
        amps = np.abs(fp[None, :] + kms[:, None] * fs[None, :])
        denom = np.sum(amps**2, axis=1)
        num = np.sum(amps * fo[None, :], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            kt = np.where(denom > 0.0, num / denom, 0.0)
        r_bins = np.sum(np.abs(fo[None, :] - kt[:, None] * amps), axis=1) / sum_fo
        if np.all(denom <= 0.0):
            log.warning("scale solve: bin %d has zero model amplitude; k_total set to 0", b)
            continue
        i_best = int(np.argmin(r_bins))
        best_kt, best_km, best_r = float(kt[i_best]), float(kms[i_best]), float(r_bins[i_best])
        if incumbent is not None:
            kt0 = float(incumbent[0][b])
            km0 = float(incumbent[1][b])
            amp0 = np.abs(fp + km0 * fs)
            r0 = float(np.sum(np.abs(fo - kt0 * amp0)) / sum_fo)
            if r0 < best_r:
                best_kt, best_km = kt0, km0
        k_total[b] = best_kt
        k_mask[b] = best_km
    return k_total, k_mask


def loss_gradients(model, cell: UnitCell, sg: SpaceGroup, refl, table: ScatteringTable,
                   state: StructureFactorState, amp_loss, chunk: int = 512):
    """Analytic dL/dxyz (Cartesian) and dL/dB for a scalar amplitude loss.

    ``amp_loss(amp) -> (value, dL/d|F_c|)``. Solvent structure factors and the
    per-bin scales inside ``state`` are treated as constants; the chain rule
    runs |F_c| -> F_protein -> (x_j, B_j) through every symmetry image.
    Returns (grad_xyz, grad_b, value, amp).
    """
    refl.require_metadata()
    hkl = refl.hkl
    d = refl.d if refl.d is not None else resolution(cell, hkl)
    s_mag = 0.5 / d
    s2 = s_mag**2
    frac = model.frac
    n = refl.n
    n_atoms = model.n_atoms

    hrots = [hkl @ op.rotation for op in sg.ops]
    tphases = [np.exp(_TWO_PI * 1j * (hkl @ op.translation_float)) for op in sg.ops]

    fp = np.zeros(n, dtype=complex)
    coeff_chunks = []
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        coeff = _atom_coefficients(model, table, s_mag[sl], s2[sl])
        coeff_chunks.append(coeff)
        acc = np.zeros(sl.stop - sl.start, dtype=complex)
        for hrot, tphase in zip(hrots, tphases):
            phase = np.exp(_TWO_PI * 1j * (hrot[sl] @ frac.T))
            acc += tphase[sl] * np.sum(coeff * phase, axis=1)
        fp[sl] = acc

    env = _aniso_envelope(cell, hkl, state.u_aniso)
    env_k = state.k_total[refl.bin_id] * env
    combined = fp + state.k_mask[refl.bin_id] * state.f_solvent
    abs_combined = np.abs(combined)
    amp = env_k * abs_combined
    value, g_amp = amp_loss(amp)

    safe = abs_combined > _AMP_TINY
    u = np.zeros(n)
    u[safe] = g_amp[safe] * env_k[safe] / abs_combined[safe]
    ut = u * combined

    grad_frac = np.zeros((n_atoms, 3))
    grad_b = np.zeros(n_atoms)
    for ci, lo in enumerate(range(0, n, chunk)):
        sl = slice(lo, min(lo + chunk, n))
        coeff = coeff_chunks[ci]
        ut_sl = ut[sl]
        for hrot, tphase in zip(hrots, tphases):
            phase = np.exp(_TWO_PI * 1j * (hrot[sl] @ frac.T))
            contrib = coeff * phase * tphase[sl, None]
            m = np.conj(contrib) * ut_sl[:, None]
            grad_frac += _TWO_PI * np.einsum("hj,hd->jd", m.imag, hrot[sl].astype(float))
            grad_b += np.einsum("h,hj->j", -s2[sl], m.real)
    grad_xyz = grad_frac @ cell.fractionalization
    return grad_xyz, grad_b, value, amp


class ScaledForward:
    """Forward-model context holding the pieces that stay fixed between
    gradient evaluations: solvent structure factors, per-bin scales, and the
    anisotropic envelope (identity by default, never refined here).
    """

    def __init__(self, cell: UnitCell, sg: SpaceGroup, refl, table: ScatteringTable | None = None,
                 config: ForwardConfig | None = None):
        self.cell = cell
        self.sg = sg
        self.refl = refl.require_metadata()
        self.table = table or ScatteringTable.default()
        self.config = config or ForwardConfig()
        n_bins = max(int(refl.n_bins), 1)
        self.k_total = np.ones(n_bins)
        self.k_mask = np.zeros(n_bins)
        self.u_aniso = np.zeros((3, 3))
        self.f_solvent = np.zeros(refl.n, dtype=complex)
        self._solved_once = False

    def default_spacing(self) -> float:
        if self.config.grid_spacing is not None:
            return self.config.grid_spacing
        d_min = float(np.min(self.refl.d))
        return min(d_min / 4.0, self.config.spacing_cap)

    def set_constant_scales(self, k_total: float, k_mask: float):
        self.k_total = np.full_like(self.k_total, float(k_total))
        self.k_mask = np.full_like(self.k_mask, float(k_mask))
        self._solved_once = True

    def rebuild_solvent(self, model):
        if not self.config.use_solvent:
            return
        grid = solvent_mask(model, self.cell, self.sg, self.default_spacing(), self.config)
        self.f_solvent = f_solvent(grid, self.refl)

    def solve_scales(self, f_protein_arr):
        incumbent = (self.k_total, self.k_mask) if self._solved_once else None
        self.k_total, self.k_mask = solve_scales(
            f_protein_arr, self.f_solvent, self.refl, self.config, incumbent=incumbent
        )
        self._solved_once = True

    def state_for(self, f_protein_arr) -> StructureFactorState:
        return StructureFactorState(
            f_protein=f_protein_arr, f_solvent=self.f_solvent,
            k_total=self.k_total, k_mask=self.k_mask, u_aniso=self.u_aniso,
        )

    def f_protein(self, model) -> np.ndarray:
        return f_protein(model, self.cell, self.sg, self.refl, self.table, self.config.chunk)

    def amplitudes(self, model):
        state = self.state_for(self.f_protein(model))
        return scale_and_combine(state, self.refl, self.cell), state

    def gradients(self, model, amp_loss):
        state = self.state_for(np.zeros(self.refl.n, dtype=complex))
        return loss_gradients(
            model, self.cell, self.sg, self.refl, self.table, state, amp_loss, self.config.chunk
        )

    def metrics(self, amp) -> dict:
        refl = self.refl
        out = {
            "r_work": r_factor(refl.f_obs, amp, refl.working),
            "r_free": r_factor(refl.f_obs, amp, refl.free_flag) if np.any(refl.free_flag) else None,
        }
        try:
            out["cc"] = pearson_cc(refl.f_obs, amp, refl.working)
        except XtalError:
            out["cc"] = None
        return out
