"""
Error types for the geolocalization head.

Every error inherits from HierGeoError and from the builtin it refines, so
callers can catch either. ``to_dict`` gives the structured form the CLI prints.
"""

from typing import Any, Optional


class HierGeoError(Exception):
    """Base class for all errors raised by this project."""

    def details(self) -> dict[str, Any]:
        return {}

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "error": type(self).__name__,
            "message": str(self),
            **self.details(),
        }


class DimensionError(HierGeoError, ValueError):
    """Shapes of tensors, layers or vectors do not agree."""


class LabelIndexError(HierGeoError, IndexError):
    """A class or scene id is outside its valid range."""


class TaxonomyInconsistencyError(HierGeoError, ValueError):
    """A class was declared with two different parents."""


class EmptyTaxonomyError(HierGeoError, ValueError):
    """No class records were supplied."""


class EmptyVideoError(HierGeoError, ValueError):
    """A video has no frame scene ids."""


class LabelLookupError(HierGeoError, KeyError):
    """A label text has no embedding and stub fallback is off."""

    def __str__(self) -> str:
        # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class InputError(HierGeoError, ValueError):
    """Malformed caller input (e.g. empty text)."""


class DegenerateInputError(HierGeoError, ValueError):
    """Input has no usable magnitude (zero vectors, all-zero counts)."""


class ConfigError(HierGeoError, ValueError):
    """Invalid or mismatched model / training configuration."""


class FormatError(HierGeoError, ValueError):
    """A binary file is malformed. ``offset`` is the byte where reading failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset

    def details(self) -> dict[str, Any]:
        return {"offset": self.offset}


class StratificationError(HierGeoError, ValueError):
    """A class cannot be represented on both sides of a split."""

    def __init__(self, message: str, class_name: Optional[str] = None):
        super().__init__(message)
        self.class_name = class_name

    def details(self) -> dict[str, Any]:
        return {"class_name": self.class_name}


class EvaluationError(HierGeoError, ArithmeticError):
    """A loss or score evaluated to a non-finite value."""


class TrainingAbortedError(HierGeoError, RuntimeError):
    """Training hit a non-finite or degenerate loss."""

    def __init__(self, message: str, batch_index: int, epoch: int, components: dict[str, float]):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch
        self.components = components

    def details(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "components": self.components,
        }
