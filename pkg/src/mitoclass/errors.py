"""
Errors: exception hierarchy shared by every mitoclass module.

UsageError subclasses are caller mistakes (bad flags, bad config values).
DataError subclasses are failures of the inputs or of the computation itself.
The CLI maps the two families to exit codes 1 and 2.
"""

from __future__ import annotations

from typing import Optional


class MitoclassError(Exception):
    exit_code = 2


class UsageError(MitoclassError):
    exit_code = 1


class DataError(MitoclassError):
    exit_code = 2


class InvalidConfig(UsageError):
    pass


class InvalidK(UsageError):
    pass


class FoldOutOfRange(UsageError):
    pass


class CropTooLarge(UsageError):
    pass


class TooFewFolds(UsageError):
    pass


class ManifestError(DataError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class MissingColumn(ManifestError):
    pass


class BadLabelCode(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class UnreadableImage(ManifestError):
    pass


class ZeroDimension(DataError):
    pass


class NonPositiveFactor(DataError):
    pass


class ZeroStd(DataError):
    pass


class BadSimplex(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class StaleCache(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class TensorShapeMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    """Readable length but undecodable content: bad header JSON, names or dtype tags."""


class EmptyInput(DataError):
    pass


class SingleClass(DataError):
    pass
