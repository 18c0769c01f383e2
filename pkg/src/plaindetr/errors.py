"""Exception types shared across the package."""


class PlainDetrError(Exception):
    pass


class DimensionError(PlainDetrError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PlainDetrError, ValueError):
    """A precondition of an operation was violated."""


class DomainError(PlainDetrError, ValueError):
    """An argument is outside the mathematical domain of the operation."""


class NumericsError(PlainDetrError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class ConfigError(PlainDetrError, ValueError):
    pass
