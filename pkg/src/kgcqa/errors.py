"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class KgcqaError(Exception):
    """Base class for all package errors."""


class DataFormatError(KgcqaError):
    """Malformed input file (triple files, map files, dataset records)."""


class VocabMismatchError(KgcqaError):
    """Entity/relation id out of range, or graphs with incompatible vocabularies."""


class QueryStructureError(KgcqaError):
    """Query graph violates well-formedness, or an unsupported nested form."""


class SamplingError(KgcqaError):
    """Query sampling exhausted its retry budget."""


class CheckpointError(KgcqaError):
    """Checkpoint integrity failure: hash mismatch, shape mismatch, missing arrays."""


class ConfigError(KgcqaError):
    """Unknown config key, bad value, or inconsistent settings."""


class TrainingDivergedError(KgcqaError):
    """Loss became NaN/Inf during training."""
