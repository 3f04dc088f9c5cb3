"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class FlftError(Exception):
    exit_code = 1


class ConfigError(FlftError, ValueError):
    exit_code = 2


class InfeasibleError(FlftError):
    """No architecture/knob satisfies the device budgets."""

    exit_code = 3


class NumericalError(FlftError, ArithmeticError):
    exit_code = 4
