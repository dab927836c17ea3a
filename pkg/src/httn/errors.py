"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class HTTNError(Exception):
    exit_code = 1


class ConfigError(HTTNError, ValueError):
    """Invalid hyper-parameters, unsolvable layer geometry, unknown config keys."""

    exit_code = 2


class DimensionError(ConfigError):
    """Tensor shapes that cannot be combined by an op."""


class DataError(HTTNError):
    exit_code = 3


class FormatError(DataError):
    """Malformed feature file or manifest.

    ``offset`` is the byte offset (or line number for manifests) where
    parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapacityError(DataError):
    """Manifest too small for the requested episode shape."""


class InvariantViolation(HTTNError):
    exit_code = 4
