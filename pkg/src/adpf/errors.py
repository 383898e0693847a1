"""Exception types shared across the package."""


class AdpfError(Exception):
    """Base class for every package-specific error."""


class ShapeMismatch(AdpfError):
    """Operands have incompatible shapes."""


class DomainError(AdpfError):
    """Input lies outside an operation's mathematical domain."""


class NotScalar(AdpfError):
    """A scalar tensor was required."""


class ChannelSplitError(AdpfError):
    """Channel count is not divisible by the requested head count."""


class TooFewMaps(AdpfError):
    """At least two attention maps are needed."""


class AllNonPositive(AdpfError):
    """Every output entry is <= 0, so rectified normalization is undefined."""


class NotADistribution(AdpfError):
    """Vector is not a probability distribution (negative entries or sum far from 1)."""


class OutOfRange(AdpfError):
    """A label falls outside the configured label space."""


class DegenerateMap(AdpfError):
    """Attention map has no positive response; no patch box can be located."""


class PatchCountMismatch(AdpfError):
    """Number of supplied patches differs from the number the network expects."""


class EmptyInput(AdpfError):
    """A non-empty collection was required."""


class MissingCheckpoint(AdpfError):
    """A required checkpoint file is absent."""


class FormatError(AdpfError):
    """A file's bytes do not match the expected format."""


class IoError(AdpfError):
    """An OS-level read or write failed."""


class SpecInvalid(AdpfError):
    """A synthetic-data spec is internally inconsistent."""


class ConfigError(AdpfError):
    """A config file could not be parsed or validated."""


class NumericalFailure(AdpfError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids else []
