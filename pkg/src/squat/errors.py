"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class SquatError(Exception):
    exit_code = 1


class ConfigError(SquatError, ValueError):
    exit_code = 1


class ShapeError(SquatError, ValueError):
    exit_code = 1


class ContractError(SquatError, ValueError):
    exit_code = 1


class DataError(SquatError, ValueError):
    exit_code = 2


class NumericalError(SquatError, ArithmeticError):
    exit_code = 3
