"""Exception hierarchy shared by every ptnet module.

Each class carries the process exit code the CLI maps it to.
"""


class PTNetError(Exception):
    exit_code = 1


class ConfigError(PTNetError, ValueError):
    exit_code = 2


class DimensionError(PTNetError, ValueError):
    exit_code = 2


class DataError(PTNetError):
    exit_code = 3


class DegenerateInputError(DataError, ValueError):
    exit_code = 3


class NumericError(PTNetError, ArithmeticError):
    exit_code = 4


class StateError(PTNetError, RuntimeError):
    exit_code = 1
