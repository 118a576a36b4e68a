class SleepkitError(Exception):
    """Base class for errors raised by sleepkit."""


class DataError(SleepkitError, ValueError):
    """Malformed or inconsistent input data (files, labels, signals)."""


class ConfigError(SleepkitError, ValueError):
    """Invalid configuration or incompatible model/weights."""


class UnsupportedLayerError(SleepkitError, NotImplementedError):
    """Raised when backpropagation reaches a layer that only supports inference."""
