"""Exception hierarchy shared by every module of the lab."""


class LabError(Exception):
    """Base class for all errors raised by loraprune_lab."""


class DimensionError(LabError, ValueError):
    """Operand shapes are incompatible."""


class InputError(LabError, ValueError):
    """An input value is outside its valid domain (e.g. a label out of range)."""


class UsageError(LabError, RuntimeError):
    """An API was called in a state where it cannot run."""


class ConfigError(LabError, ValueError):
    """A configuration value is missing or invalid."""


class InvariantError(LabError, RuntimeError):
    """A structural invariant (mask monotonicity, merge equivalence, ...) was violated."""


class NonFiniteError(LabError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(LabError, ValueError):
    """A checkpoint file is malformed."""
