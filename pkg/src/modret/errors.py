"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, invariant violations exit 3.
"""


class ModretError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ShapeError(ModretError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(ModretError, ValueError):
    """A configuration value or file is invalid."""


class DataError(ModretError, ValueError):
    """Input data violates a contract (bad ids, unknown attributes, ...)."""


class CompositionError(ModretError, ValueError):
    """Prompt stacks cannot be combined."""


class ModuleLookupError(ModretError, KeyError):
    """A named module is not present in the registry."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "module not found"


class ModuleFormatError(ModretError):
    """A persisted module or index file failed validation."""


class CorruptionError(ModuleFormatError):
    """Payload truncated or checksum mismatch."""


class UnsupportedVersionError(ModuleFormatError):
    pass


class EvaluationError(ModretError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class ExprSyntaxError(ModretError, ValueError):
    """Composition expression could not be parsed."""

    exit_code = 1

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class InvariantViolation(ModretError, AssertionError):
    exit_code = 3
