"""Exception types shared across the package, mapped to CLI exit codes."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operands have incompatible shapes or dtypes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Malformed or missing input data (CLI exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (CLI exit code 4)."""
