"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values.

    ``where`` names the operation or block that failed.
    """

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class FormatError(ValueError):
    """A serialized artifact is malformed. ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss. ``step`` is the global step index."""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} (step {step})")


class MetricError(ValueError):
    """A metric is undefined for the given input."""


class ArtifactMismatchError(ValueError):
    """A checkpoint or data file is inconsistent with the requested run."""


class BenchError(RuntimeError):
    """The benchmark harness cannot produce a trustworthy measurement."""
