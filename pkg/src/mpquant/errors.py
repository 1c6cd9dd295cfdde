"""Exception hierarchy and process exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class MpquantError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(MpquantError):
    """Invalid configuration, shapes, or arguments."""

    exit_code = EXIT_CONFIG


class NumericError(MpquantError):
    """Non-finite values or numerically degenerate states."""

    exit_code = EXIT_NUMERIC


class DegenerateCodesError(NumericError):
    """All quantized codes are zero; the scale update is undefined."""


class TrainingDivergedError(NumericError):
    """Validation perplexity exceeded the divergence threshold."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class PackIOError(MpquantError):
    """Base class for packed-model container failures."""

    exit_code = EXIT_IO


class TruncatedFileError(PackIOError):
    """File ends before the declared structure is complete."""


class ChecksumError(PackIOError):
    """Trailing CRC32 does not match the file contents."""


class BadMagicError(PackIOError):
    """File does not start with the container magic."""


class UnsupportedVersionError(PackIOError):
    """Container version is newer than this reader understands."""
