"""Exception types shared across the package."""

from __future__ import annotations


class SSRefineError(Exception):
    """Base class for package errors."""


class ShapeError(SSRefineError):
    """Operands with incompatible shapes; records the op and the shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class DomainError(SSRefineError):
    """Operand outside an op's mathematical domain (log of <= 0, zero divisor, ...)."""


class ContractError(SSRefineError):
    """A documented precondition was violated by the caller."""


class ConfigError(SSRefineError):
    """Invalid configuration value; records the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class GenerationError(SSRefineError):
    """Scene synthesis could not satisfy its layout constraints."""


class IngestionError(SSRefineError):
    """A data file could not be read; records the path."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class NumericalError(SSRefineError):
    """A numerical routine failed (singular solve, non-convergence, ...)."""


class TrainingAbort(SSRefineError):
    """A loss term became non-finite; records the term and step."""

    def __init__(self, term: str, step: int, value: float):
        self.term = term
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss term '{term}' at step {step}: {value!r}")


class CheckpointError(SSRefineError):
    """A checkpoint file failed header or payload validation."""
