"""Normalized-amplitude (E-value) statistics, Gaussian and Rice negative
log-likelihoods with analytic gradients, and the crystallographic agreement
metrics (R factors, Pearson CC).

All statistics that feed a loss (bin means, the RMS used to rescale sigmas)
are computed over the working set only, so nothing evaluated on the working
mask can depend on held-out observations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import XtalError

__all__ = [
    "LikelihoodConfig",
    "NormalizedAmplitudes",
    "normalize_to_e",
    "amp_grad_from_e_grad",
    "gauss_nll",
    "rice_nll",
    "guidance_gradient",
    "r_factor",
    "pearson_cc",
    "log_i0",
    "make_amp_objective",
    "make_guidance_amp_loss",
]

SIGMA_TILDE_FLOOR = 1e-6
_EOBS_FLOOR = 1e-6
_AMP_TINY = 1e-30


@dataclass(frozen=True)
class LikelihoodConfig:
    """Model-error correlation, guidance loss weights, bin count."""

    sigma_a: float = 0.85
    lambda_gauss: float = 0.9
    lambda_rice: float = 0.1
    n_bins: int = 10

    def __post_init__(self):
        if not 0.0 <= self.sigma_a <= 1.0:
            raise ValueError(f"sigma_a={self.sigma_a} outside [0, 1]")
        if self.lambda_gauss < 0 or self.lambda_rice < 0:
            raise ValueError("likelihood weights must be nonnegative")


def _bin_stats(amplitudes, refl, stats_mask):
    """Per-bin mean of |F|^2 / epsilon over the statistics mask."""
    refl.require_metadata()
    amplitudes = np.asarray(amplitudes, float)
    n_bins = max(int(refl.n_bins), 1)
    weights = (amplitudes**2 / refl.epsilon)[stats_mask]
    sums = np.bincount(refl.bin_id[stats_mask], weights=weights, minlength=n_bins)
    counts = np.bincount(refl.bin_id[stats_mask], minlength=n_bins)
    if np.any(counts == 0):
        raise XtalError("empty resolution bin in normalization (binning not merged?)")
    means = sums / counts
    if np.any(means <= 0.0):
        raise XtalError("a resolution bin has all-zero amplitudes; cannot normalize")
    return means, counts


def normalize_to_e(amplitudes, refl, stats_mask=None):
    """E-values: e(h) = |F(h)| / sqrt(eps(h) * <|F|^2/eps>_bin).

    Bin means come from ``stats_mask`` (default: working reflections) and are
    applied to every reflection. Returns (e, bin_means).
    """
    if stats_mask is None:
        stats_mask = refl.working
    means, _ = _bin_stats(amplitudes, refl, stats_mask)
    e = np.asarray(amplitudes, float) / np.sqrt(refl.epsilon * means[refl.bin_id])
    return e, means


def sigma_tilde(refl, stats_mask=None):
    """Experimental sigmas rescaled by RMS(|F_o|) over the working set."""
    if stats_mask is None:
        stats_mask = refl.working
    rms = float(np.sqrt(np.mean(refl.f_obs[stats_mask] ** 2)))
    if rms <= 0.0:
        raise XtalError("all working amplitudes are zero; cannot rescale sigmas")
    return np.maximum(refl.sigma / rms, SIGMA_TILDE_FLOOR)


@dataclass(frozen=True)
class NormalizedAmplitudes:
    """E-scale observed and calculated amplitudes plus the audit trail of the
    bin means used to produce them."""

    e_obs: np.ndarray
    e_calc: np.ndarray
    sigma_tilde: np.ndarray
    bin_means_obs: np.ndarray
    bin_means_calc: np.ndarray

    @classmethod
    def build(cls, refl, f_calc_amp, stats_mask=None) -> "NormalizedAmplitudes":
        e_obs, means_obs = normalize_to_e(refl.f_obs, refl, stats_mask)
        e_calc, means_calc = normalize_to_e(f_calc_amp, refl, stats_mask)
        return cls(e_obs, e_calc, sigma_tilde(refl, stats_mask), means_obs, means_calc)


def amp_grad_from_e_grad(grad_e, amplitudes, refl, bin_means, stats_mask=None):
    """Chain dL/de back to dL/d|F| through the normalization, including the
    dependence of the bin means on the amplitudes inside the statistics mask.
    """
    if stats_mask is None:
        stats_mask = refl.working
    amplitudes = np.asarray(amplitudes, float)
    grad_e = np.asarray(grad_e, float)
    eps = refl.epsilon.astype(float)
    means = bin_means[refl.bin_id]
    e = amplitudes / np.sqrt(eps * means)

    n_bins = max(int(refl.n_bins), 1)
    counts = np.bincount(refl.bin_id[stats_mask], minlength=n_bins).astype(float)
    dot_ge = np.bincount(refl.bin_id, weights=grad_e * e, minlength=n_bins)

    grad_amp = grad_e / np.sqrt(eps * means)
    correction = np.zeros_like(grad_amp)
    sel = np.asarray(stats_mask, bool)
    b = refl.bin_id[sel]
    correction[sel] = amplitudes[sel] / (eps[sel] * counts[b] * bin_means[b]) * dot_ge[b]
    return grad_amp - correction


def gauss_nll(norm: NormalizedAmplitudes, mask):
    """Heteroscedastic least squares on E-values over ``mask``.

    Returns (value, d/d e_calc) with the gradient zero off the mask.
    """
    mask = np.asarray(mask, bool)
    resid = norm.e_obs - norm.e_calc
    var = norm.sigma_tilde**2
    value = float(np.sum(resid[mask] ** 2 / (2.0 * var[mask])))
    grad = np.zeros_like(resid)
    grad[mask] = -resid[mask] / var[mask]
    return value, grad


def log_i0(z):
    """log I0(z), series below 20 and the asymptotic expansion above."""
    z = np.asarray(z, float)
    out = np.empty_like(z)
    small = z < 20.0
    out[small] = np.log(np.i0(z[small]))
    zb = z[~small]
    out[~small] = zb - 0.5 * np.log(2.0 * np.pi * zb) + 1.0 / (8.0 * zb)
    return out


def _log_cosh(z):
    z = np.abs(np.asarray(z, float))
    return z + np.log1p(np.exp(-2.0 * z)) - np.log(2.0)


def rice_nll(norm: NormalizedAmplitudes, centric, config: LikelihoodConfig, mask):
    """Negative log-likelihood of the phase-marginalized amplitude densities.

    Acentric reflections follow a Rice density, centric ones a folded normal;
    the variance term combines model error (1 - sigma_a^2) with the rescaled
    experimental variance (doubled for the two acentric degrees of freedom).
    Evaluation is log-domain and stable for Bessel/cosh arguments up to 1e4.
    """
    mask = np.asarray(mask, bool)
    centric = np.asarray(centric, bool)
    sa = config.sigma_a
    e_obs = np.maximum(norm.e_obs, _EOBS_FLOOR)
    e_calc = norm.e_calc
    st2 = norm.sigma_tilde**2

    sig2 = np.where(centric, 1.0 - sa**2 + st2, 1.0 - sa**2 + 2.0 * st2)
    if np.any(sig2[mask] < 1e-12):
        raise XtalError("degenerate Rice variance (sigma_a ~ 1 with ~zero sigma)")

    logp = np.zeros(len(e_obs))
    grad = np.zeros(len(e_obs))

    ac = mask & ~centric
    if np.any(ac):
        s2 = sig2[ac]
        z = 2.0 * sa * e_obs[ac] * e_calc[ac] / s2
        logp[ac] = (
            np.log(2.0 * e_obs[ac] / s2)
            - (e_obs[ac] ** 2 + (sa * e_calc[ac]) ** 2) / s2
            + log_i0(z)
        )
        ratio = special.i1e(z) / special.i0e(z)
        grad[ac] = -2.0 * sa**2 * e_calc[ac] / s2 + (2.0 * sa * e_obs[ac] / s2) * ratio

    ce = mask & centric
    if np.any(ce):
        s2 = sig2[ce]
        z = sa * e_obs[ce] * e_calc[ce] / s2
        logp[ce] = (
            0.5 * np.log(2.0 / (np.pi * s2))
            - (e_obs[ce] ** 2 + (sa * e_calc[ce]) ** 2) / (2.0 * s2)
            + _log_cosh(z)
        )
        grad[ce] = -sa**2 * e_calc[ce] / s2 + (sa * e_obs[ce] / s2) * np.tanh(z)

    value = float(-np.sum(logp[mask]))
    return value, -grad


def guidance_gradient(norm: NormalizedAmplitudes, centric, config: LikelihoodConfig, mask):
    """Weighted guidance loss lambda_g * L_gauss + lambda_r * L_rice.

    Returns (value, d/d e_calc); either term is skipped when its weight is 0.
    """
    if config.lambda_gauss == 0.0 and config.lambda_rice == 0.0:
        raise XtalError("guidance needs at least one nonzero likelihood weight")
    value = 0.0
    grad = np.zeros(len(norm.e_calc))
    if config.lambda_gauss > 0.0:
        v, g = gauss_nll(norm, mask)
        value += config.lambda_gauss * v
        grad += config.lambda_gauss * g
    if config.lambda_rice > 0.0:
        v, g = rice_nll(norm, centric, config, mask)
        value += config.lambda_rice * v
        grad += config.lambda_rice * g
    return value, grad


def r_factor(f_obs, f_calc_amp, mask) -> float:
    """R = sum | |F_o| - |F_c| | / sum |F_o| over the mask."""
    mask = np.asarray(mask, bool)
    if not np.any(mask):
        raise XtalError("R-factor over an empty reflection mask")
    fo = np.asarray(f_obs, float)[mask]
    fc = np.asarray(f_calc_amp, float)[mask]
    denom = float(np.sum(fo))
    if denom <= 0.0:
        raise XtalError("R-factor undefined: sum of observed amplitudes is zero")
    return float(np.sum(np.abs(fo - fc)) / denom)


def pearson_cc(a, b, mask=None) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if mask is not None:
        sel = np.asarray(mask, bool)
        a, b = a[sel], b[sel]
    if len(a) < 2:
        raise XtalError("Pearson correlation needs at least two values")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da**2) * np.sum(db**2))
    if denom <= 0.0:
        raise XtalError("Pearson correlation undefined for zero-variance input")
    return float(np.sum(da * db) / denom)


def _neg_cc_with_grad(f_obs, amp, mask):
    sel = np.asarray(mask, bool)
    a = np.asarray(f_obs, float)[sel]
    b = np.asarray(amp, float)[sel]
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sum(da**2)
    sb = np.sum(db**2)
    denom = np.sqrt(sa * sb)
    if denom <= 0.0:
        raise XtalError("Pearson correlation undefined for zero-variance input")
    cc = float(np.sum(da * db) / denom)
    grad = np.zeros(len(np.asarray(amp)))
    grad[sel] = -(da / denom - cc * db / sb)
    return -cc, grad


def make_amp_objective(name: str, refl, config: LikelihoodConfig | None = None, mask=None):
    """Factory for refinement objectives acting on |F_c| arrays.

    Returns ``loss(amp) -> (value, d value / d amp)``; the gradient is zero on
    reflections outside ``mask`` (default: the working set).
    """
    if mask is None:
        mask = refl.working
    mask = np.asarray(mask, bool)
    config = config or LikelihoodConfig()

    if name == "r_factor":
        denom = float(np.sum(refl.f_obs[mask]))
        if denom <= 0.0:
            raise XtalError("R-factor objective undefined: working amplitudes sum to zero")

        def loss(amp):
            diff = np.asarray(amp, float) - refl.f_obs
            value = float(np.sum(np.abs(diff[mask])) / denom)
            grad = np.zeros(len(diff))
            grad[mask] = np.sign(diff[mask]) / denom
            return value, grad

        return loss

    if name == "neg_cc":
        def loss(amp):
            return _neg_cc_with_grad(refl.f_obs, amp, mask)

        return loss

    if name in ("gauss", "rice"):
        e_obs, _ = normalize_to_e(refl.f_obs, refl)
        st = sigma_tilde(refl)

        def loss(amp):
            e_calc, means_calc = normalize_to_e(amp, refl)
            norm = NormalizedAmplitudes(e_obs, e_calc, st, np.array([]), means_calc)
            if name == "gauss":
                value, g_e = gauss_nll(norm, mask)
            else:
                value, g_e = rice_nll(norm, refl.centric, config, mask)
            return value, amp_grad_from_e_grad(g_e, amp, refl, means_calc)

        return loss

    raise XtalError(f"unknown objective {name!r} (expected r_factor, neg_cc, gauss or rice)")


def make_guidance_amp_loss(refl, config: LikelihoodConfig, mask=None):
    """Combined Gaussian+Rice guidance loss as a function of |F_c|."""
    if mask is None:
        mask = refl.working
    mask = np.asarray(mask, bool)
    e_obs, _ = normalize_to_e(refl.f_obs, refl)
    st = sigma_tilde(refl)

    def loss(amp):
        e_calc, means_calc = normalize_to_e(amp, refl)
        norm = NormalizedAmplitudes(e_obs, e_calc, st, np.array([]), means_calc)
        value, g_e = guidance_gradient(norm, refl.centric, config, mask)
        return value, amp_grad_from_e_grad(g_e, amp, refl, means_calc)

    return loss
