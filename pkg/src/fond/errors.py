"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An input violates a documented precondition (range, normalization, ...)."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate, e.g. a zero-norm row fed to a normalizer."""


class BatchTooSmallError(ValueError):
    """Batch holds too few samples for a pairwise loss."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class PlanMismatchError(ValueError):
    """Dataset contents and split plan disagree."""


class CsvFormatError(ValueError):
    """Malformed dataset file; carries the offending 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; carries the step and component values."""

    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components
