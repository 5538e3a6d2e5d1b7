"""Exception taxonomy shared across the package."""


class UdadError(Exception):
    """Base class for all package-specific failures."""


class DvolError(UdadError):
    """Base class for volume container parse failures."""


class DvolMagicError(DvolError):
    """File does not start with the container magic."""


class DvolTruncatedError(DvolError):
    """File ends inside the header region."""


class DvolSizeMismatchError(DvolError):
    """Declared geometry disagrees with what is actually present.

    Raised both when the payload byte count differs from the product of the
    declared dims and when header fields disagree internally, e.g. seven
    declared channels but six gradient directions.
    """


class DvolHeaderError(DvolError):
    """Header JSON is malformed or missing required fields."""


class GradientSchemeError(UdadError):
    """Gradient table is unusable: bad shape, non-unit vectors, bad bvals."""


class ShapeError(UdadError):
    """Array argument has the wrong shape for the requested operation."""


class NonFiniteError(UdadError):
    """A NaN or infinity appeared where finite values are required."""


class CheckpointError(UdadError):
    """Network checkpoint is malformed or incompatible."""


class ConfigError(UdadError):
    """Invalid configuration value."""
