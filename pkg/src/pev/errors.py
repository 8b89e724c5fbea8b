"""Exception types shared across the package."""


class PEVError(Exception):
    """Base class for all package errors."""


class ConfigError(PEVError, ValueError):
    """Invalid configuration, arguments, or shapes."""


class DatasetError(PEVError, ValueError):
    """Malformed or empty dataset input."""


class CheckpointFormatError(PEVError):
    """Checkpoint container could not be decoded."""


class BadMagicError(CheckpointFormatError):
    pass


class VersionMismatchError(CheckpointFormatError):
    pass


class TruncatedFileError(CheckpointFormatError):
    pass


class ShapeMismatchError(CheckpointFormatError):
    pass


class EmptyStoreError(PEVError, ValueError):
    """Unlearning was requested against a store without checkpoints."""


class MissingArtifactError(PEVError):
    """A CLI step needs output from an earlier step that does not exist."""
