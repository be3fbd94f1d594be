"""Exception types shared across the package."""


class MaestError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(MaestError):
    """Malformed file, wrong magic/version, or unsupported input encoding."""


class InputTooShort(MaestError):
    """Input smaller than one analysis window / one patch."""


class DomainError(MaestError):
    """Value outside the mathematical domain of an operation."""


class EmptyInput(MaestError):
    """An operation that requires at least one element got none."""


class DegenerateStats(MaestError):
    """Normalization statistics with zero (or negative) variance."""


class NotFound(MaestError):
    """Requested record does not exist."""


class ConfigError(MaestError):
    """Inconsistent or out-of-range configuration."""


class ShapeError(MaestError):
    """Runtime tensor shape mismatch."""


class ShapeMismatch(MaestError):
    """Stored tensor shape differs from the expected shape."""


class MissingTensor(MaestError):
    """Weight archive lacks one or more required tensors."""


class NumericsError(MaestError):
    """Non-finite values where finite ones are required."""


class DegenerateMetric(MaestError):
    """No label had both positive and negative examples."""
