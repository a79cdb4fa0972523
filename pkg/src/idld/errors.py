"""Exception and warning types shared across the package."""


class ContractViolation(ValueError):
    """A precondition of an operation was not met by the caller."""


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class NumericError(ArithmeticError):
    """A NaN showed up where it must not. ``op`` names the culprit."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"NaN encountered in backward of '{op}'")


class IngestionError(ValueError):
    """Malformed or unsupported input file. ``field`` names what was wrong."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointOffsetError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when training hits a non-finite loss."""

    def __init__(self, message, last_good=None):
        self.last_good = last_good
        super().__init__(message)


class InfeasibleAlignmentWarning(RuntimeWarning):
    """CTC target cannot be aligned within the given input length."""


class ShortSignalWarning(RuntimeWarning):
    """Signal shorter than one analysis frame; zero padded."""
