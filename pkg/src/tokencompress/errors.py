"""Exception types shared across the package."""


class CompressorError(Exception):
    """Base class for all errors raised by tokencompress."""


class ContractError(CompressorError, ValueError):
    """A precondition on the inputs was violated."""


class ShapeError(ContractError):
    """Array extents do not chain or do not match the configuration."""


class FormatError(CompressorError):
    """An on-disk file is truncated, has a bad magic or a corrupt header."""


class VersionError(FormatError):
    """A parameter file was written with an unsupported format version."""


class CertificationError(CompressorError):
    """A gradient or oracle certification did not pass."""
