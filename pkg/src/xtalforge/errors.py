"""Exception types shared across the package."""


class XtalError(Exception):
    """Base class for all xtalforge errors."""


class ParseError(XtalError):
    """Malformed input file. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SymmetryError(XtalError):
    """Invalid symmetry operator or space-group definition."""


class SamplingError(XtalError):
    """Diffusion sampling produced non-finite coordinates.

    The per-step trace collected up to the failure is attached as ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
