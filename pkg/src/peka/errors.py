"""Exception types shared across the package."""


class PekaError(Exception):
    """Base class for package-specific failures."""


class ShapeError(PekaError, ValueError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(PekaError, ValueError):
    """A configuration value violates its documented constraints."""


class InfiniteDivergenceError(PekaError, ValueError):
    """KL divergence is infinite: q vanishes where p has mass."""


class SingularMatrixError(PekaError, ValueError):
    """A linear solve hit a singular system."""


class NanLossError(PekaError, RuntimeError):
    """Training produced a non-finite loss."""


class DataFormatError(PekaError, ValueError):
    """A dataset or model file does not match its on-disk format."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(DataFormatError):
    """File carries a format version this build cannot read."""


class TruncatedFileError(DataFormatError):
    """File ends before the payload promised by its header."""


class HeaderMismatchError(DataFormatError):
    """Header fields are internally inconsistent with the payload."""
