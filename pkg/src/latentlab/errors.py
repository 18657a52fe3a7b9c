"""Exception types shared across the package."""


class LatentLabError(Exception):
    """Base class for all package-specific errors."""


class CapExceededError(LatentLabError):
    """Requested space is larger than the enumeration cap."""


class OutOfSpaceError(LatentLabError, IndexError):
    """Index refers to an element outside the task's finite spaces."""


class EmptyEventError(LatentLabError):
    """Event materializes to the empty set."""


class ZeroMassEventError(LatentLabError):
    """Event has probability zero under the current model."""


class FeatureMapMismatchError(LatentLabError):
    """Weight vector or companion model disagrees with the feature map."""


class HorizonViolationError(LatentLabError):
    """A trajectory cannot terminate within the declared horizon."""


class UnreachableEventError(LatentLabError):
    """Every trajectory of a shaped decision process is clamped."""


class DivergenceError(LatentLabError):
    """Iterative optimizer decreased its objective for too many steps."""


class SurrogateDecreaseError(LatentLabError):
    """A surrogate-ascent step could not find an improving step size."""


class UnnormalizedVariationalError(LatentLabError):
    """Variational weights do not form a probability distribution."""


class UnseenTagError(LatentLabError):
    """Generation was conditioned on a tag with zero conditional mass."""


class ZeroProbabilityPairError(LatentLabError):
    """A preference pair has zero probability under policy or reference."""


class ConfigError(LatentLabError):
    """Experiment configuration failed to parse or validate."""


class TaskMismatchError(LatentLabError):
    """Operation requires configs that share the same task and event."""


class RecordFormatError(LatentLabError):
    """A persisted record or checkpoint file is malformed."""
