"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: configuration and contract
violations exit 2, file problems exit 3, numerical aborts exit 4.
"""


class QidError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(QidError):
    """A documented pre- or post-condition was violated by the caller."""


class DimensionError(ContractError):
    """Operands have incompatible shapes. The message names both."""


class VocabularyError(ContractError):
    """A token id falls outside the embedding table."""


class DegenerateInputError(ContractError):
    """An input is structurally unusable, e.g. a zero-norm query vector."""


class ConfigError(QidError):
    """A configuration key, value, or combination is invalid."""


class FormatError(QidError):
    """A file does not conform to its declared binary layout."""


class NumericsError(QidError):
    """A computation produced or received non-finite values."""
