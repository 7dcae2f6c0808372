"""Exception types shared across the package."""

from __future__ import annotations


class PriorSegError(Exception):
    """Base class for package-specific failures."""


class DimensionError(PriorSegError):
    """Tensor shapes or sizes are inconsistent with the operation."""


class VocabularyError(PriorSegError):
    """A token id falls outside the configured vocabulary."""


class ConfigError(PriorSegError):
    """Invalid or inconsistent configuration."""


class GenerationError(PriorSegError):
    """A scene request cannot be satisfied within tolerances."""


class NumericError(PriorSegError):
    """Non-finite values where finite ones are required."""


class DatasetFormatError(PriorSegError):
    """A dataset file is malformed; carries file path context."""

    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = str(path)
        self.detail = detail


class CheckpointError(PriorSegError):
    """Checkpoint missing, malformed, or config fingerprint mismatch."""
