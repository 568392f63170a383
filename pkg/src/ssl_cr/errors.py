"""Exception hierarchy shared by the training modules and the CLI."""


class SslCrError(Exception):
    """Base class for every error raised by ssl_cr."""

    category = "internal"
    exit_code = 1


class ConfigurationError(SslCrError):
    """Invalid or inconsistent configuration, profile or checkpoint pairing."""

    category = "configuration"
    exit_code = 2


class ArgumentError(SslCrError, ValueError):
    """A call received an argument outside its contract."""

    category = "argument"
    exit_code = 3


class SamplingError(SslCrError):
    """A patch footprint could not be placed inside the image."""

    category = "sampling"
    exit_code = 4


class NumericError(SslCrError, ArithmeticError):
    """Non-finite or non-normalized numeric input."""

    category = "numeric"
    exit_code = 5


class UndefinedMetricError(SslCrError):
    """A metric is undefined for the given data (e.g. single-class labels)."""

    category = "undefined-metric"
    exit_code = 6


class IntegrityError(SslCrError):
    """A stored artifact does not match the hash recorded in its manifest."""

    category = "integrity"
    exit_code = 7
