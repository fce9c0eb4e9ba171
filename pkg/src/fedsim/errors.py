"""Exception types shared across the package."""


class FedsimError(Exception):
    """Base class for all package errors."""


class DimensionError(FedsimError):
    """Operands disagree on shape or length."""


class DegenerateInputError(FedsimError):
    """Input is degenerate: zero total weight, zero-norm vector, empty input."""


class InputError(FedsimError):
    """Run-time input values violate a precondition."""


class ConfigError(FedsimError):
    """Invalid or inconsistent configuration."""


class PartitionError(FedsimError):
    """A partition request cannot be satisfied."""


class StateError(FedsimError):
    """Internal protocol state is inconsistent."""


class _LocatedError(FedsimError):
    """Error that carries a file/line location."""

    def __init__(self, message: str, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        elif line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)


class RecordError(_LocatedError):
    """A data record is malformed (bad JSON, missing field, empty code)."""


class SchemaError(_LocatedError):
    """A data record violates the input schema (e.g. unknown label value)."""
