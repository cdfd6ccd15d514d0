"""Exception types shared across the package."""


class KlgError(Exception):
    """Base class for all package errors."""


class DimensionError(KlgError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(KlgError, ArithmeticError):
    """A NaN or infinite value reached a place that requires finite numbers."""


class ContractError(KlgError, ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(KlgError, ValueError):
    """Invalid configuration value."""


class ParseError(KlgError, ValueError):
    """Malformed record in an input file."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class VocabularyError(KlgError, KeyError):
    """A label name is not present in the label vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown label"


class DivergenceError(KlgError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class MissingArtifactError(KlgError, FileNotFoundError):
    """An upstream pipeline artifact has not been produced yet."""

    def __init__(self, path, producer):
        super().__init__(f"missing {path}; run `klg {producer}` first")
        self.path = path
        self.producer = producer
