"""Exception types raised across the package."""


class ManetError(Exception):
    """Base class for all package errors."""


class CapacityError(ManetError, ValueError):
    """More identities were requested than the attribute space can hold."""


class VocabularyError(ManetError, KeyError):
    """A word needed for a caption is missing from the vocabulary."""


class DegenerateBatchError(ManetError, ValueError):
    """A batch has no negative identity, so hard-negative mining is undefined."""


class CompatibilityError(ManetError, ValueError):
    """A checkpoint was produced under a different model configuration."""


class NumericError(ManetError, ArithmeticError):
    """A loss component or gradient became non-finite."""


class FormatError(ManetError, ValueError):
    """A binary array file or archive is malformed."""
