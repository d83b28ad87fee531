"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class EvidxError(Exception):
    exit_code = 1


class ParameterError(EvidxError, ValueError):
    exit_code = 1


class DimensionError(EvidxError, ValueError):
    exit_code = 1


class ContractError(EvidxError, ValueError):
    exit_code = 1


class DataError(EvidxError, ValueError):
    exit_code = 1


class FormatError(EvidxError):
    exit_code = 2


class NumericError(EvidxError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    """Raised when the explanation objective stops being finite."""

    exit_code = 3

    def __init__(self, step, last_breakdown):
        self.step = step
        self.last_breakdown = last_breakdown
        super().__init__(f"total loss became non-finite at step {step}; last finite breakdown: {last_breakdown}")


class SelfTestFailure(EvidxError):
    exit_code = 4
