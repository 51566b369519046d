"""Exception hierarchy shared by all modules."""


class MilError(Exception):
    """Base class for every error raised by milab."""


class ShapeError(MilError, ValueError):
    pass


class DegenerateInputError(MilError, ValueError):
    pass


class NumericError(MilError, ArithmeticError):
    pass


class ConfigError(MilError, ValueError):
    pass


class ContractError(MilError, ValueError):
    pass


class StateError(MilError, RuntimeError):
    pass


class BatchError(MilError, RuntimeError):
    """A sampler source pool was empty."""

    def __init__(self, pool, context=""):
        self.pool = pool
        self.context = context
        msg = f"source pool {pool} is empty"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class DataError(MilError, ValueError):
    pass


class FormatError(MilError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class UndefinedMetricError(MilError, ValueError):
    pass


class CapabilityError(MilError, TypeError):
    pass


class MissingArtifactError(MilError, FileNotFoundError):
    pass
