"""
Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to:
0 success, 2 config error, 3 verification failure, 4 runtime/numeric error.
"""


class PromptVitError(Exception):
    exit_code = 4

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class ConfigError(PromptVitError):
    exit_code = 2


class VerificationError(PromptVitError):
    exit_code = 3


class NumericError(PromptVitError):
    exit_code = 4


class DimensionError(NumericError):
    """Operand shapes do not agree."""


class ContractError(NumericError):
    """A precondition of an operation was violated."""


class NumericOverflowError(NumericError):
    """A finite input produced a non-finite value."""


class NonFiniteLossError(NumericError):
    pass


class DataError(PromptVitError):
    exit_code = 4


class DataGenerationError(DataError):
    pass
