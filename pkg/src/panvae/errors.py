"""Exception hierarchy shared across the package.

The CLI maps each family onto a stable exit code, so new error types should
subclass one of these rather than ``Exception`` directly.
"""


class PanVAEError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PanVAEError, ValueError):
    """Invalid configuration or mismatched tensor shapes."""


class DataError(PanVAEError, ValueError):
    """Malformed, empty or inconsistent dataset."""


class FormatError(DataError):
    """Binary file does not follow the expected layout.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalDegeneracyError(PanVAEError, ArithmeticError):
    """A Gram matrix could not be factorized even after jitter escalation."""

    def __init__(self, message: str, class_index: int | None = None):
        super().__init__(message)
        self.class_index = class_index


class TrainingDivergenceError(PanVAEError, ArithmeticError):
    """A loss component became non-finite."""

    def __init__(self, component: str, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component '{component}'{where}")
        self.component = component
        self.step = step


class DegenerateGeometryError(PanVAEError, ValueError):
    """Geometry needed by a metric collapsed (coincident prototypes, flat hulls)."""


class ProjectionError(DegenerateGeometryError):
    """Input to a 2D projection has fewer than two informative directions."""


class CheckpointError(PanVAEError):
    """Checkpoint cannot be used (wrong format tag, corrupted payload)."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the checkpoint payload."""
