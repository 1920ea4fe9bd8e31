"""Exception hierarchy.

Every error carries a short ``category`` string; the command-line tool prints
it as the machine-parsable prefix of its one-line failure message.
"""


class R2GenError(Exception):
    category = "error"


class ContractError(R2GenError, ValueError):
    """A precondition of an operation was violated by the caller."""

    category = "contract"


class DimensionError(R2GenError, ValueError):
    category = "dimension"


class NumericOverflowError(R2GenError, FloatingPointError):
    category = "overflow"


class ConfigError(R2GenError, ValueError):
    category = "config"


class ConfigNotFoundError(ConfigError, FileNotFoundError):
    category = "config-not-found"


class VocabularyError(R2GenError, ValueError):
    category = "vocabulary"


class LengthError(R2GenError, ValueError):
    category = "length"


class GeometryError(R2GenError, ValueError):
    category = "geometry"


class FeatureFormatError(R2GenError, ValueError):
    category = "feature-format"


class BadMagicError(FeatureFormatError):
    category = "bad-magic"


class TruncatedPayloadError(FeatureFormatError):
    category = "truncated"


class DimensionOverflowError(FeatureFormatError):
    category = "dimension-overflow"


class CheckpointError(R2GenError, ValueError):
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    category = "checkpoint-version"


class CheckpointShapeError(CheckpointError):
    category = "checkpoint-shape"


class SchemaError(R2GenError, ValueError):
    category = "schema"


class TrainingDivergedError(R2GenError, FloatingPointError):
    category = "diverged"


class CountValidationError(R2GenError, AssertionError):
    category = "count-validation"
