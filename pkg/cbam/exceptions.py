# cbam/exceptions.py
"""
Error types raised by the cbam services.

Each error carries the process exit code the CLI maps it to: 1 for anything the caller
can fix (bad shapes, files, flags, configs), 2 for numerical failures.
"""


class CbamError(Exception):
    exit_code = 1


# --- Validation errors (exit 1) ---------------------------------------------
class ShapeMismatch(CbamError):
    pass


class InvalidKernel(CbamError):
    pass


class NotScalar(CbamError):
    pass


class NodeNotOnTape(CbamError):
    pass


class BadMagic(CbamError):
    pass


class TruncatedFile(CbamError):
    pass


class LabelOutOfRange(CbamError):
    pass


class ClassOutOfRange(CbamError):
    pass


class IoFailure(CbamError):
    pass


class ConfigError(CbamError):
    pass


# --- Numerical errors (exit 2) ----------------------------------------------
class NumericalError(CbamError):
    exit_code = 2


class DivergenceDetected(NumericalError):
    pass


class GradientMismatch(NumericalError):
    pass
