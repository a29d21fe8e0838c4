"""Exception hierarchy shared by every module."""


class M2DError(Exception):
    """Base class for library errors."""


class DimensionError(M2DError, ValueError):
    pass


class DomainError(M2DError, ValueError):
    pass


class NumericError(M2DError, ArithmeticError):
    pass


class ContractError(M2DError, RuntimeError):
    pass


class ConfigError(M2DError, ValueError):
    pass


class FormatError(M2DError, ValueError):
    pass
