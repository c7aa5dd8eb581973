# agrg/errors.py

"""
Exception hierarchy shared by every stage of the pipeline.

Each exception carries the process exit code the command line returns when it
escapes a command, the same way the API layer maps failures to HTTP status codes.
"""


class AGRGError(Exception):
    """Base class for all pipeline errors."""
    exit_code = 1


class ConfigError(AGRGError, ValueError):
    """Invalid or inconsistent run configuration, or a checkpoint built from another config."""
    exit_code = 2


class MissingPrerequisiteError(AGRGError):
    """A stage or command was started before the artifact it depends on exists."""
    exit_code = 3


class NumericalError(AGRGError, ArithmeticError):
    """A forward pass or finite-difference probe produced NaN or Inf."""
    exit_code = 4


class GraphError(AGRGError, RuntimeError):
    pass


class ShapeError(AGRGError, ValueError):
    pass


class LabelError(AGRGError, ValueError):
    pass


class FrozenParameterError(AGRGError, AssertionError):
    """A gradient reached a parameter that the current stage must leave untouched."""


class SharedParameterError(AGRGError, ValueError):
    """Two per-label heads hold the same parameter object."""


class DatasetFormatError(AGRGError, ValueError):
    """Bad magic, unsupported version, truncated record or unmatched case ids."""
