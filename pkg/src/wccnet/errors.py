"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI uses when it escapes a
command.
"""


class WccError(Exception):
    exit_code = 1


class ParameterError(WccError, ValueError):
    """Argument outside an operation's precondition."""

    exit_code = 2


class ShapeError(ParameterError):
    """Dimension, sizing or coverage mismatch."""


class FormatError(WccError):
    """Malformed VXV1/VXC1 file (bad magic, truncation, version mismatch)."""

    exit_code = 3


class NumericError(WccError, ArithmeticError):
    exit_code = 4


class IntegrityError(WccError):
    """Frozen parameters were modified, or a checkpoint does not match."""

    exit_code = 5


class StateError(WccError, RuntimeError):
    """Optimizer or autograd graph used in an invalid state."""

    exit_code = 6


class StaleGraphError(StateError):
    pass
