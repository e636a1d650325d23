"""Exception hierarchy shared across the package."""


class CapeError(Exception):
    """Base class for all errors raised by caperec."""


class DimensionError(CapeError, ValueError):
    pass


class ConfigError(CapeError, ValueError):
    pass


class LengthError(ConfigError):
    """Context longer than the configured maximum."""


class DegenerateRowError(CapeError, ValueError):
    """A softmax row has no unmasked entry."""


class GraphStateError(CapeError, RuntimeError):
    pass


class ParseError(CapeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpecError(CapeError, ValueError):
    pass


class SamplingError(CapeError, ValueError):
    pass


class MetricError(CapeError, ValueError):
    """Metric is undefined for the given input (e.g. a single class)."""


class TrainingError(CapeError, RuntimeError):
    pass


class CheckpointError(CapeError, ValueError):
    pass
