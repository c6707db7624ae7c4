"""xtalforge: crystallographic refinement with a differentiable
structure-factor forward model and diffusion-posterior-sampling guidance."""

__version__ = "0.1.0"

from .cell_sym import SpaceGroup, SymOp, UnitCell, parse_symop
from .io_formats import AtomicModel, ReflectionSet

__all__ = [
    "__version__",
    "UnitCell",
    "SymOp",
    "SpaceGroup",
    "parse_symop",
    "AtomicModel",
    "ReflectionSet",
]
