"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class StatisticsError(ValueError):
    """A statistic was requested on empty data."""


class DegenerateInputError(ValueError):
    """A point cloud became unusable (e.g. an empty pyramid level)."""


class ParseError(ValueError):
    """Malformed text input. Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid experiment configuration. Carries the key path."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class TrainingFault(RuntimeError):
    """Non-finite value encountered during training."""

    def __init__(self, message, step=None, tensor=None):
        self.step = step
        self.tensor = tensor
        parts = []
        if step is not None:
            parts.append(f"step {step}")
        if tensor is not None:
            parts.append(f"tensor '{tensor}'")
        if parts:
            message = f"{message} ({', '.join(parts)})"
        super().__init__(message)
