"""Parsers and writers: PDB models, MTZ and text reflections, run configs,
metrics logs."""

from .mtz import read_mtz, read_mtz_crystal_info, write_mtz
from .pdb import read_pdb, read_symmetry_ops, write_pdb
from .runconfig import read_config_file, resolve_config
from .textio import (
    REFLECTION_HEADER,
    format_metric_record,
    read_metrics_log,
    read_reflection_text,
    write_metrics_log,
    write_reflection_text,
)
from .types import AtomicModel, ReflectionSet, assign_resolution_bins

__all__ = [
    "AtomicModel",
    "ReflectionSet",
    "assign_resolution_bins",
    "read_pdb",
    "write_pdb",
    "read_symmetry_ops",
    "read_mtz",
    "write_mtz",
    "read_mtz_crystal_info",
    "read_reflection_text",
    "write_reflection_text",
    "REFLECTION_HEADER",
    "format_metric_record",
    "write_metrics_log",
    "read_metrics_log",
    "read_config_file",
    "resolve_config",
]
