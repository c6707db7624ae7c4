"""Post-guidance refinement: joint first-order optimization of coordinates and
isotropic B-factors against a crystallographic objective, with periodic scale
re-solving and B clamping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .align import rmsd
from .errors import XtalError
from .likelihood import LikelihoodConfig, make_amp_objective

log = logging.getLogger(__name__)

__all__ = [
    "RefinementConfig",
    "RefinementResult",
    "AdamState",
    "adam_step",
    "plddt_to_b",
    "refine",
]

OBJECTIVES = ("r_factor", "neg_cc", "gauss", "rice")


@dataclass(frozen=True)
class RefinementConfig:
    """Refinement hyperparameters; B-factors are clamped to [b_min, b_max]
    after every gradient step and scales re-solved every
    ``scale_solve_interval`` steps."""

    n_steps: int = 50
    objective: str = "r_factor"
    lr_xyz: float = 0.02
    lr_b: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    b_min: float = 1.0
    b_max: float = 80.0
    scale_solve_interval: int = 10
    b_init: str = "uniform"          # uniform | file | plddt
    b_init_value: float = 20.0
    sigma_a: float = 0.85

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.b_min < self.b_max:
            raise ValueError("need b_min < b_max")
        if self.lr_xyz <= 0 or self.lr_b <= 0:
            raise ValueError("learning rates must be positive")
        if self.b_init not in ("uniform", "file", "plddt"):
            raise ValueError("b_init must be uniform, file or plddt")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(m=np.zeros_like(params, dtype=float), v=np.zeros_like(params, dtype=float))


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    params = np.asarray(params, float)
    grads = np.asarray(grads, float)
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {params.shape} != gradient shape {grads.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m=m, v=v, t=t)


def plddt_to_b(plddt, b_min: float = 1.0, b_max: float = 80.0, residue_index=None):
    """Monotone decreasing confidence-to-B map into [b_min, b_max].

    The linear policy used here is this artifact's default, not a published
    conversion; full confidence maps to b_min, zero confidence to b_max.
    ``residue_index`` broadcasts per-residue scores onto atoms.
    """
    p = np.asarray(plddt, float)
    if np.any((p < 0) | (p > 100)):
        raise XtalError("pLDDT values must lie in [0, 100]")
    b = b_max - (p / 100.0) * (b_max - b_min)
    if residue_index is not None:
        b = b[np.asarray(residue_index, int)]
    return b


@dataclass
class RefinementResult:
    model: object
    records: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)


def _initial_b(model, config: RefinementConfig, plddt=None):
    if config.b_init == "uniform":
        return np.full(model.n_atoms, config.b_init_value)
    if config.b_init == "file":
        return model.b_iso.copy()
    if plddt is None:
        raise XtalError("b_init=plddt needs per-residue pLDDT values")
    return plddt_to_b(plddt, config.b_min, config.b_max, residue_index=model.residue_index)


def refine(model, refl, fwd, config: RefinementConfig, reference=None, plddt=None) -> RefinementResult:
    """Adam refinement of (xyz, B) on working reflections.

    ``fwd`` is a :class:`~xtalforge.forward.ScaledForward` context; its solvent
    mask and scales are rebuilt every ``scale_solve_interval`` steps and held
    fixed in between. The returned model is the best-objective iterate, so the
    final working objective never exceeds the initial one. ``reference``
    coordinates, when given, add an RMSD column to the per-step records.
    """
    refl.require_metadata()
    like_cfg = LikelihoodConfig(sigma_a=config.sigma_a)
    amp_loss = make_amp_objective(config.objective, refl, like_cfg, refl.working)

    b0 = np.clip(_initial_b(model, config, plddt), config.b_min, config.b_max)
    model = model.with_b(b0)

    fwd.rebuild_solvent(model)
    fwd.solve_scales(fwd.f_protein(model))

    def evaluate(current):
        amp, _ = fwd.amplitudes(current)
        value = amp_loss(amp)[0]
        metrics = fwd.metrics(amp)
        return value, metrics

    def record_for(step, value, metrics, current):
        rec = {"phase": "refine", "step": step, "objective": config.objective,
               "value": value, **metrics}
        if reference is not None:
            rec["rmsd_ref"] = rmsd(current.xyz, reference)
        return rec

    value0, metrics0 = evaluate(model)
    if not np.isfinite(value0):
        raise XtalError(f"objective {config.objective} is non-finite at initialization")
    records = [record_for(0, value0, metrics0, model)]
    initial = {"value": value0, **metrics0}

    best_value, best_model, best_metrics = value0, model, metrics0
    state_xyz = AdamState.zeros_like(model.xyz)
    state_b = AdamState.zeros_like(model.b_iso)
    lr_xyz, lr_b = config.lr_xyz, config.lr_b
    violations = 0

    for step in range(1, config.n_steps + 1):
        grad_xyz, grad_b, _, _ = fwd.gradients(model, amp_loss)
        new_xyz, state_xyz = adam_step(model.xyz, grad_xyz, state_xyz, lr_xyz,
                                       config.adam_beta1, config.adam_beta2, config.adam_eps)
        new_b, state_b = adam_step(model.b_iso, grad_b, state_b, lr_b,
                                   config.adam_beta1, config.adam_beta2, config.adam_eps)
        model = model.with_xyz(new_xyz).with_b(np.clip(new_b, config.b_min, config.b_max))

        if config.scale_solve_interval > 0 and step % config.scale_solve_interval == 0:
            fwd.rebuild_solvent(model)
            fwd.solve_scales(fwd.f_protein(model))

        value, metrics = evaluate(model)
        records.append(record_for(step, value, metrics, model))
        if not np.isfinite(value):
            raise XtalError(f"objective became non-finite at step {step}")
        if value > 1.1 * value0 and value0 > 0:
            violations += 1
            if violations == 1:
                lr_xyz *= 0.5
                lr_b *= 0.5
                log.warning("objective rose above 110%% of initial at step %d; halving learning rates", step)
            else:
                raise XtalError(
                    f"objective diverged (>110% of initial) again at step {step} after halving learning rates"
                )
        if value < best_value:
            best_value, best_model, best_metrics = value, model, metrics

    return RefinementResult(
        model=best_model,
        records=records,
        initial=initial,
        final={"value": best_value, **best_metrics},
    )
