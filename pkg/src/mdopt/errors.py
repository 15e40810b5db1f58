"""Exception hierarchy shared by every mdopt module."""


class MdoptError(Exception):
    """Base class for all mdopt errors."""


class LayoutError(MdoptError, ValueError):
    """Two parameter vectors with different layouts were combined."""


class BatchIndexError(MdoptError, IndexError):
    """A batch references a user or item outside the model's tables."""


class DivergenceError(MdoptError, FloatingPointError):
    """A loss, gradient or parameter became non-finite."""

    def __init__(self, message, domain=None, worker=None):
        self.domain = domain
        self.worker = worker
        parts = [message]
        if domain is not None:
            parts.append(f"domain={domain}")
        if worker is not None:
            parts.append(f"worker={worker}")
        super().__init__(" ".join(parts))


class ConfigError(MdoptError, ValueError):
    """Invalid hyperparameters or experiment configuration."""


class DataError(MdoptError, ValueError):
    """Invalid dataset contents, infeasible generator settings or bad files."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MetricError(MdoptError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
