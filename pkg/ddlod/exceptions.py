"""Error types raised by the library; the CLI maps them to exit codes."""

from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class DdlodError(Exception):
    exit_code = 1


class ConfigError(DdlodError, ValueError):
    """Invalid experiment configuration; message names the offending field"""
    exit_code = EXIT_CONFIG


class DimensionError(DdlodError, ValueError):
    exit_code = EXIT_CONFIG


class MeshError(DdlodError, ValueError):
    """Incompatible mesh sizes or an invalid element / vertex id"""
    exit_code = EXIT_CONFIG


class FieldFormatError(DdlodError, ValueError):
    exit_code = EXIT_IO


class BasisFormatError(DdlodError, ValueError):
    exit_code = EXIT_IO


class StaleCacheError(DdlodError, RuntimeError):
    exit_code = EXIT_IO


class FactorizationError(DdlodError, ArithmeticError):
    """A pivot of a Cholesky-type factorization was not positive"""
    exit_code = EXIT_SOLVER

    def __init__(self, message: str, pivot: Optional[int] = None):
        super().__init__(message)
        self.pivot = pivot


class BreakdownError(DdlodError, ArithmeticError):
    """Conjugate gradient met a non-positive curvature or a non-descent direction"""
    exit_code = EXIT_SOLVER

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration


class LocalizationError(DdlodError, RuntimeError):
    exit_code = EXIT_SOLVER


class ConvergenceError(DdlodError, RuntimeError):
    exit_code = EXIT_SOLVER
