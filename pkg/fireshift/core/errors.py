class FireError(Exception):
    """Base error; `exit_code` is the CLI category."""

    exit_code = 1


class ConfigError(FireError):
    exit_code = 1


class DataError(FireError):
    exit_code = 2


class NumericError(FireError):
    exit_code = 3


class StorageError(FireError):
    exit_code = 4


class DimensionError(NumericError):
    pass


class NonConvergenceError(NumericError):
    pass


class ContractViolation(NumericError):
    pass


class NonFiniteError(NumericError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
