"""Batch command-line interface.

Commands: ``stats``, ``score``, ``refine``, ``guide``, ``synth``,
``symexpand``. Every command resolves its configuration as CLI flag > config
file > default, runs statelessly, and writes a manifest (resolved config,
input digests, per-phase timings, failing phase on error) under ``--out``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .align import apply as apply_transform
from .align import kabsch, rmsd
from .cell_sym import SpaceGroup, UnitCell, expand_to_p1, resolution
from .errors import XtalError
from .forward import ForwardConfig, ScaledForward
from .io_formats import (
    read_config_file,
    read_mtz,
    read_mtz_crystal_info,
    read_pdb,
    read_reflection_text,
    read_symmetry_ops,
    resolve_config,
    write_metrics_log,
    write_mtz,
    write_pdb,
    write_reflection_text,
)
from .io_formats.mtz import MAGIC as MTZ_MAGIC
from .refine import RefinementConfig, refine
from .sampler import GuidanceConfig, ToyGaussianPrior, dps_sample
from .scatter import ScatteringTable
from .synth import SynthSpec, generate, hkl_sphere

PHASE_SETUP = "setup"


class RunTracker:
    """Collects manifest data and writes it on both success and failure."""

    def __init__(self, command: str, argv, out_dir: Path):
        self.command = command
        self.argv = list(argv)
        self.out_dir = out_dir
        self.phase = PHASE_SETUP
        self.inputs: dict = {}
        self.config: dict = {}
        self.timings: dict = {}
        self.extra: dict = {}
        self._start = time.perf_counter()

    def set_phase(self, name: str):
        self.phase = name

    def time_phase(self, name: str):
        tracker = self

        class _Timer:
            def __enter__(self):
                tracker.set_phase(name)
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                tracker.timings[name + "_s"] = time.perf_counter() - self.t0
                return False

        return _Timer()

    def add_input(self, path):
        p = Path(path)
        self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()

    def add_config(self, name: str, cfg):
        self.config[name] = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else dict(cfg)

    def write(self, status: str, error: str | None = None):
        self.timings["total_s"] = time.perf_counter() - self._start
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "status": status,
            "failing_phase": self.phase if status == "error" else None,
            "error": error,
            "config": self.config,
            "inputs": self.inputs,
            "timings": self.timings,
            **self.extra,
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_reflections(path):
    """Sniff MTZ magic vs the text sidecar; returns (refl, cell, sg_name)."""
    data = Path(path).read_bytes()
    if data[:4] == MTZ_MAGIC:
        cell, sg_name = read_mtz_crystal_info(data)
        return read_mtz(data), cell, sg_name
    return read_reflection_text(data), None, None


def _resolve_spacegroup(name: str | None, pdb_bytes: bytes | None = None) -> SpaceGroup:
    if name:
        try:
            return SpaceGroup.from_symbol(name)
        except XtalError:
            pass
    if pdb_bytes is not None:
        ops = read_symmetry_ops(pdb_bytes)
        if ops:
            return SpaceGroup.from_ops(name or "from-file", ops)
    if name:
        raise XtalError(
            f"space group {name!r} is not bundled and no REMARK 290 operators were found"
        )
    raise XtalError("no space group given (use --spacegroup or a model with CRYST1/REMARK 290)")


def _parse_cell(text: str) -> UnitCell:
    values = [float(v) for v in text.replace(",", " ").split()]
    if len(values) != 6:
        raise XtalError("--cell needs six numbers: a,b,c,alpha,beta,gamma")
    return UnitCell(*values)


def _section(file_cfg: dict, name: str) -> dict:
    return file_cfg.get(name, {})


def _forward_config(file_cfg, args) -> ForwardConfig:
    overrides = {}
    if getattr(args, "no_solvent", False):
        overrides["use_solvent"] = False
    return resolve_config(ForwardConfig, _section(file_cfg, "forward"), overrides)


def _print(line: str):
    sys.stdout.write(line + "\n")


# ----------------------------------------------------------------- commands


def cmd_stats(args, tracker: RunTracker) -> int:
    tracker.set_phase("parse")
    tracker.add_input(args.reflections)
    refl, cell, sg_name = _load_reflections(args.reflections)
    model_bytes = None
    if args.model:
        tracker.add_input(args.model)
        model_bytes = Path(args.model).read_bytes()
        _, cell_model, sg_model = read_pdb(model_bytes)
        cell = cell or cell_model
        sg_name = args.spacegroup or sg_model or sg_name
    if args.cell:
        cell = _parse_cell(args.cell)
    if args.spacegroup:
        sg_name = args.spacegroup

    tracker.set_phase("stats")
    n = refl.n
    n_free = int(refl.free_flag.sum())
    _print(f"reflections          {n}")
    _print(f"free reflections     {n_free} ({n_free / max(n, 1):.4f})")
    sg = None
    if sg_name or model_bytes is not None:
        try:
            sg = _resolve_spacegroup(sg_name, model_bytes)
        except XtalError:
            sg = None
    if cell is None:
        _print("unit cell unknown (pass --cell or --model for resolution statistics)")
        return 0
    if sg is None:
        _print("space group unknown; assuming P1 for centric/epsilon statistics")
        sg = SpaceGroup.from_symbol("P1")
    fcfg = _forward_config(read_config_file(args.config) if args.config else {}, args)
    meta = refl.with_metadata(cell, sg, fcfg.n_bins, fcfg.min_refl_per_bin)
    _print(f"resolution range     {meta.d.max():.3f} - {meta.d.min():.3f} A")
    _print(f"centric reflections  {int(meta.centric.sum())}")
    possible = hkl_sphere(cell, float(meta.d.min()) * 0.999)
    d_possible = resolution(cell, possible)
    _print("bin  d_max   d_min   n_refl  complete  <|F|^2>")
    for b in range(meta.n_bins):
        sel = meta.bin_id == b
        d_lo, d_hi = float(meta.d[sel].max()), float(meta.d[sel].min())
        count = int(sel.sum())
        n_possible = int(np.sum((d_possible <= d_lo * 1.0001) & (d_possible >= d_hi * 0.9999)))
        mean_f2 = float(np.mean(meta.f_obs[sel] ** 2))
        _print(
            f"{b:3d}  {d_lo:6.2f}  {d_hi:6.2f}  {count:6d}  {min(count / max(n_possible, 1), 1.0):8.3f}  {mean_f2:10.3f}"
        )
    tracker.extra["stats"] = {"n_reflections": n, "n_free": n_free}
    return 0


def _score_setup(args, tracker, swap_free=False):
    tracker.set_phase("parse")
    tracker.add_input(args.model)
    tracker.add_input(args.reflections)
    pdb_bytes = Path(args.model).read_bytes()
    model, cell, sg_name = read_pdb(pdb_bytes)
    refl, cell_mtz, sg_mtz = _load_reflections(args.reflections)
    if cell_mtz is not None and not cell.approx_equal(cell_mtz, rel=0.01):
        if not getattr(args, "force", False):
            raise XtalError(
                f"unit cell mismatch beyond 1% between model {cell} and reflections {cell_mtz}; "
                "use --force to override"
            )
    sg = _resolve_spacegroup(sg_name or sg_mtz, pdb_bytes)
    if swap_free:
        refl = dataclasses.replace(refl, free_flag=~refl.free_flag)
    file_cfg = read_config_file(args.config) if args.config else {}
    fcfg = _forward_config(file_cfg, args)
    refl = refl.with_metadata(cell, sg, fcfg.n_bins, fcfg.min_refl_per_bin)
    fwd = ScaledForward(cell, sg, refl, ScatteringTable.default(), fcfg)
    return model, refl, fwd, file_cfg


def cmd_score(args, tracker: RunTracker) -> int:
    model, refl, fwd, _ = _score_setup(args, tracker, swap_free=args.swap_free_flags)
    tracker.set_phase("score")
    fwd.rebuild_solvent(model)
    fwd.solve_scales(fwd.f_protein(model))
    amp, _ = fwd.amplitudes(model)
    metrics = fwd.metrics(amp)
    _print(f"R_work {metrics['r_work']:.4f}")
    _print(f"R_free {metrics['r_free'] if metrics['r_free'] is not None else float('nan'):.4f}")
    _print(f"CC     {metrics['cc']:.4f}")
    if args.reference:
        tracker.add_input(args.reference)
        ref_model, _, _ = read_pdb(Path(args.reference).read_bytes())
        if ref_model.n_atoms != model.n_atoms:
            raise XtalError("reference and model atom counts differ; cannot superpose")
        metrics["rmsd_all"] = rmsd(model.xyz, ref_model.xyz)
        metrics["rmsd_calpha"] = (
            rmsd(model.xyz, ref_model.xyz, atom_names=model.atom_name, subset="calpha")
            if np.any(model.calpha_mask)
            else None
        )
        _print(f"RMSD   {metrics['rmsd_all']:.4f}")
        if metrics["rmsd_calpha"] is not None:
            _print(f"RMSD_CA {metrics['rmsd_calpha']:.4f}")
    tracker.extra["metrics"] = {k: (None if v is None else float(v)) for k, v in metrics.items()}
    return 0


def cmd_refine(args, tracker: RunTracker) -> int:
    model, refl, fwd, file_cfg = _score_setup(args, tracker)
    overrides = {"n_steps": args.steps, "objective": args.objective, "b_init": args.b_init}
    rcfg = resolve_config(RefinementConfig, _section(file_cfg, "refine"), overrides)
    tracker.add_config("refine", rcfg)
    tracker.add_config("forward", fwd.config)

    reference_xyz = None
    if args.reference:
        tracker.add_input(args.reference)
        ref_model, _, _ = read_pdb(Path(args.reference).read_bytes())
        transform = kabsch(model.xyz, ref_model.xyz)
        model = model.with_xyz(apply_transform(transform, model.xyz))
        reference_xyz = ref_model.xyz
    plddt = None
    if args.plddt:
        tracker.add_input(args.plddt)
        plddt = np.array([float(v) for v in Path(args.plddt).read_text().split()])

    with tracker.time_phase("phase2"):
        result = refine(model, refl, fwd, rcfg, reference=reference_xyz, plddt=plddt)

    tracker.set_phase("write")
    out = tracker.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cell = fwd.cell
    (out / "model.pdb").write_bytes(write_pdb(result.model, cell, fwd.sg.name))
    (out / "metrics.log").write_bytes(write_metrics_log(result.records))
    tracker.extra["summary"] = {"initial": result.initial, "final": result.final}
    _print(
        f"refine: {rcfg.objective} {result.initial['value']:.4f} -> {result.final['value']:.4f}  "
        f"R_work {result.initial['r_work']:.4f} -> {result.final['r_work']:.4f}"
    )
    return 0


def _read_prior_spec(path):
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if not parser.has_section("prior"):
        raise XtalError(f"prior file {path} lacks a [prior] section")
    section = dict(parser.items("prior"))
    kind = section.get("kind", "toy_gaussian")
    if kind != "toy_gaussian":
        raise XtalError(f"unknown prior kind {kind!r} (this build ships toy_gaussian)")
    if "center" not in section or "sigma0" not in section:
        raise XtalError("[prior] needs center=<pdb path> and sigma0=<float>")
    center = Path(path).parent / section["center"]
    return center, float(section["sigma0"])


def cmd_guide(args, tracker: RunTracker) -> int:
    tracker.set_phase("parse")
    tracker.add_input(args.reflections)
    tracker.add_input(args.prior)
    tracker.add_input(args.reference)

    ref_bytes = Path(args.reference).read_bytes()
    reference_model, cell, sg_name = read_pdb(ref_bytes)
    sg = _resolve_spacegroup(sg_name, ref_bytes)
    center_path, sigma0 = _read_prior_spec(args.prior)
    tracker.add_input(center_path)
    center_model, _, _ = read_pdb(center_path.read_bytes())
    if center_model.n_atoms != reference_model.n_atoms:
        raise XtalError("prior center and reference atom counts differ")

    refl, cell_mtz, _ = _load_reflections(args.reflections)
    if cell_mtz is not None and not cell.approx_equal(cell_mtz, rel=0.01) and not args.force:
        raise XtalError("unit cell mismatch beyond 1% between reference and reflections")

    file_cfg = read_config_file(args.config) if args.config else {}
    fcfg = _forward_config(file_cfg, args)
    refl = refl.with_metadata(cell, sg, fcfg.n_bins, fcfg.min_refl_per_bin)

    goverrides = {
        "n_steps": args.steps,
        "guidance_start": args.t_g,
        "step_size": args.rho,
        "seed": args.seed,
    }
    if args.no_solvent:
        goverrides["use_solvent"] = False
    gcfg_base = resolve_config(GuidanceConfig, _section(file_cfg, "guidance"), goverrides)
    rcfg = resolve_config(
        RefinementConfig, _section(file_cfg, "refine"),
        {"n_steps": args.refine_steps, "objective": args.objective},
    )
    tracker.add_config("guidance", gcfg_base)
    tracker.add_config("refine", rcfg)
    tracker.add_config("forward", fcfg)

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [gcfg_base.seed]
    summaries = []
    for seed in seeds:
        gcfg = dataclasses.replace(gcfg_base, seed=seed)
        out_dir = tracker.out_dir if len(seeds) == 1 else tracker.out_dir / f"seed_{seed}"
        sub = RunTracker(tracker.command, tracker.argv, out_dir)
        sub.inputs = dict(tracker.inputs)
        sub.config = dict(tracker.config)
        sub.config["guidance"] = dataclasses.asdict(gcfg)
        try:
            summary = _guide_single(
                center_model, reference_model, refl, cell, sg, sigma0, gcfg, rcfg, fcfg,
                out_dir, sub, align=not args.no_align,
            )
            sub.extra["summary"] = summary
            sub.write("ok")
            summaries.append({"seed": seed, **summary})
        except Exception as exc:
            sub.write("error", error=str(exc))
            raise
    tracker.set_phase("summary")
    summaries.sort(key=lambda s: (s["r_free"] is None, s["r_free"]))
    if len(seeds) > 1:
        (tracker.out_dir / "summary.json").write_text(json.dumps(summaries, indent=2) + "\n")
    for s in summaries:
        _print(
            f"seed {s['seed']}: R_work {s['r_work']:.4f}  "
            f"R_free {s['r_free'] if s['r_free'] is not None else float('nan'):.4f}"
        )
    tracker.extra["ranking"] = summaries
    return 0


def _guide_single(center_model, reference_model, refl, cell, sg, sigma0, gcfg, rcfg, fcfg,
                  out_dir: Path, tracker: RunTracker, align=True) -> dict:
    from .likelihood import LikelihoodConfig, make_guidance_amp_loss

    center_model = center_model.with_cell(cell)
    fwd_guide = ScaledForward(cell, sg, refl, ScatteringTable.default(),
                              dataclasses.replace(fcfg, use_solvent=gcfg.use_solvent))
    fwd_guide.set_constant_scales(gcfg.k_total, gcfg.k_mask)
    like_cfg = LikelihoodConfig(sigma_a=gcfg.sigma_a, lambda_gauss=gcfg.lambda_gauss,
                                lambda_rice=gcfg.lambda_rice)
    amp_loss = make_guidance_amp_loss(refl, like_cfg)
    call_count = [0]

    def guidance(x0_crystal):
        current = center_model.with_xyz(x0_crystal)
        if gcfg.use_solvent and call_count[0] % max(gcfg.solvent_interval, 1) == 0:
            fwd_guide.rebuild_solvent(current)
        call_count[0] += 1
        grad_xyz, _, value, amp = fwd_guide.gradients(current, amp_loss)
        return value, grad_xyz, fwd_guide.metrics(amp)

    prior = ToyGaussianPrior(center=center_model.xyz, sigma0=sigma0)
    with tracker.time_phase("phase1"):
        sample = dps_sample(prior, guidance, reference_model.xyz, gcfg, align=align)
        transform = kabsch(sample.x0, reference_model.xyz)
        model_sampled = center_model.with_xyz(apply_transform(transform, sample.x0))

    fwd_refine = ScaledForward(cell, sg, refl, ScatteringTable.default(), fcfg)
    with tracker.time_phase("phase2"):
        result = refine(model_sampled, refl, fwd_refine, rcfg, reference=reference_model.xyz)

    tracker.set_phase("write")
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [{"phase": "guide", **rec} for rec in sample.trace] + result.records
    (out_dir / "model.pdb").write_bytes(write_pdb(result.model, cell, sg.name))
    (out_dir / "metrics.log").write_bytes(write_metrics_log(records))
    return {
        "r_work": result.final.get("r_work"),
        "r_free": result.final.get("r_free"),
        "objective": result.final.get("value"),
        "guidance_calls": sample.guidance_calls,
        "rmsd_to_reference": rmsd(result.model.xyz, reference_model.xyz),
    }


def cmd_synth(args, tracker: RunTracker) -> int:
    tracker.set_phase("synth")
    spec = SynthSpec(
        cell=_parse_cell(args.cell),
        spacegroup=args.spacegroup,
        n_atoms=args.atoms,
        d_min=args.dmin,
        seed=args.seed if args.seed is not None else 0,
        noise=args.noise,
        sigma_frac=args.sigma_frac,
        b_mode=args.b_mode,
    )
    bundle = generate(spec)
    tracker.set_phase("write")
    out = tracker.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.pdb").write_bytes(write_pdb(bundle.model, spec.cell, spec.spacegroup))
    (out / "reflections.txt").write_bytes(write_reflection_text(bundle.refl))
    (out / "reflections.mtz").write_bytes(write_mtz(bundle.refl, spec.cell, bundle.spacegroup))
    (out / "truth.json").write_text(json.dumps(bundle.truth, indent=2, sort_keys=True) + "\n")
    tracker.extra["truth"] = bundle.truth
    _print(f"synth: {bundle.truth['n_reflections']} reflections, {spec.n_atoms} atoms -> {out}")
    return 0


def cmd_symexpand(args, tracker: RunTracker) -> int:
    tracker.set_phase("parse")
    tracker.add_input(args.model)
    pdb_bytes = Path(args.model).read_bytes()
    model, cell, sg_name = read_pdb(pdb_bytes)
    sg = _resolve_spacegroup(args.spacegroup or sg_name, pdb_bytes)
    tracker.set_phase("expand")
    expanded = expand_to_p1(model, sg)
    out = tracker.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.pdb").write_bytes(write_pdb(expanded, cell, "P 1"))
    _print(f"symexpand: {model.n_atoms} atoms x {sg.n_ops} ops -> {expanded.n_atoms}")
    return 0


# -------------------------------------------------------------------- main


def _add_common(p):
    p.add_argument("--config", help="run-configuration file ([guidance]/[refine]/[forward])")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, default=None, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xtalforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"xtalforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="reflection-file statistics")
    p.add_argument("reflections")
    p.add_argument("--model", help="PDB model supplying cell/space group")
    p.add_argument("--cell", help="a,b,c,alpha,beta,gamma")
    p.add_argument("--spacegroup")
    p.add_argument("--no-solvent", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("score", help="R factors and CC of a model against data")
    p.add_argument("model")
    p.add_argument("reflections")
    p.add_argument("--reference", help="reference PDB for RMSD")
    p.add_argument("--force", action="store_true", help="ignore cell mismatch")
    p.add_argument("--swap-free-flags", action="store_true")
    p.add_argument("--no-solvent", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("refine", help="coordinate + B-factor refinement")
    p.add_argument("model")
    p.add_argument("reflections")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--objective", choices=["r_factor", "neg_cc", "gauss", "rice"], default=None)
    p.add_argument("--reference", help="align the model onto this PDB before refining")
    p.add_argument("--b-init", choices=["uniform", "file", "plddt"], default=None)
    p.add_argument("--plddt", help="text file of per-residue pLDDT values")
    p.add_argument("--force", action="store_true")
    p.add_argument("--no-solvent", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("guide", help="guided diffusion sampling + refinement")
    p.add_argument("reflections")
    p.add_argument("--prior", required=True, help="toy prior spec file ([prior] center/sigma0)")
    p.add_argument("--reference", required=True, help="crystal-frame reference PDB")
    p.add_argument("--steps", type=int, default=None, help="diffusion steps T")
    p.add_argument("--t-g", dest="t_g", type=int, default=None, help="guidance start step")
    p.add_argument("--rho", type=float, default=None, help="guidance strength")
    p.add_argument("--refine-steps", type=int, default=None)
    p.add_argument("--objective", choices=["r_factor", "neg_cc", "gauss", "rice"], default=None)
    p.add_argument("--seeds", help="comma-separated seeds; runs one trajectory each")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--no-solvent", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("synth", help="generate a synthetic crystal bundle")
    p.add_argument("--cell", default="12,12,12,90,90,90")
    p.add_argument("--spacegroup", default="P1")
    p.add_argument("--atoms", type=int, default=20)
    p.add_argument("--dmin", type=float, default=1.5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--sigma-frac", type=float, default=None)
    p.add_argument("--b-mode", choices=["uniform", "hetero"], default="uniform")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("symexpand", help="expand a model to P1")
    p.add_argument("model")
    p.add_argument("--spacegroup")
    _add_common(p)
    p.set_defaults(func=cmd_symexpand)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    tracker = RunTracker(args.command, argv, Path(args.out))
    try:
        rc = args.func(args, tracker)
        tracker.write("ok")
        return rc
    except Exception as exc:  # manifest written with the failing phase
        tracker.write("error", error=f"{type(exc).__name__}: {exc}")
        print(f"error [{tracker.phase}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
