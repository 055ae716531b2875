"""Exception hierarchy shared across the toolkit."""


class MetaconvError(Exception):
    """Base class for all toolkit errors."""


class SamplingError(MetaconvError):
    """Grid pitch too coarse for the requested propagation."""


class NumericError(MetaconvError):
    """Non-finite samples or a numerically invalid state."""


class DimensionError(MetaconvError):
    """Shape or grid mismatch between operands."""


class DomainError(MetaconvError):
    """Physical parameter outside its valid domain (e.g. evanescent angle)."""


class DegenerateInputError(MetaconvError):
    """Input carries no usable signal (all-zero kernel, empty subset)."""


class LayoutError(MetaconvError):
    """Channel footprints overlap on the focal plane."""


class ExtractionWarning(UserWarning):
    """A spot expected in the PSF was too weak to integrate reliably."""


class IllConditionedWarning(UserWarning):
    """Direction set passed to the far-field decomposition is degenerate."""


class FormatError(MetaconvError):
    """A container file does not match its declared format."""


class IntegrityError(MetaconvError):
    """Checksum mismatch on a downloaded or cached file."""


class FetchError(MetaconvError):
    """Dataset could not be retrieved and no cache exists."""


class InsufficientBaselineError(MetaconvError):
    """Calibration displacement below one grid pixel."""


class ConfigError(MetaconvError):
    """Unknown keys or invalid values in a run configuration."""
