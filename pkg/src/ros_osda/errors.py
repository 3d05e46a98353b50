"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Invalid configuration, split or input data."""


class ShapeError(ValueError):
    """Array or tensor with an unexpected shape."""


class DomainError(ValueError):
    """Argument outside of its admissible range."""


class UndefinedMetricError(ValueError):
    """A metric cannot be computed for the given predictions."""


class ParseError(ValueError):
    """Malformed artifact file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class TrainingError(RuntimeError):
    """Training diverged or a pipeline stage failed."""

    def __init__(self, message, stage=None):
        self.stage = stage
        prefix = f"[{stage}] " if stage else ""
        super().__init__(prefix + message)
