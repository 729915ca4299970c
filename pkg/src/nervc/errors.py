"""Exception hierarchy shared by every nervc module."""


class NervcError(Exception):
    """Base class for all errors raised by nervc."""


class DimensionError(NervcError, ValueError):
    pass


class ShapeError(NervcError, ValueError):
    pass


class GroupError(NervcError, ValueError):
    pass


class UnsupportedKernelError(NervcError, ValueError):
    pass


class ParameterError(NervcError, ValueError):
    pass


class ContractError(NervcError, RuntimeError):
    pass


class StateError(NervcError, ValueError):
    pass


class ConfigError(NervcError, ValueError):
    pass


class WeightError(NervcError, ValueError):
    pass


class SpecError(NervcError, ValueError):
    pass


class FrameIndexError(NervcError, IndexError):
    pass


class DataError(NervcError, ValueError):
    pass


class FormatError(NervcError, ValueError):
    pass


class CorruptionError(NervcError, ValueError):
    pass


class SizeError(NervcError, ValueError):
    pass


class TrainingError(NervcError, RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
