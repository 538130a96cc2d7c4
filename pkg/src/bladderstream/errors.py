"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Input violates an operation's precondition."""


class TraceParseError(ValueError):
    """A trace or event CSV file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(ValueError):
    """Run configuration file is invalid (unknown key, bad value)."""


class CheckpointError(ValueError):
    """Checkpoint is corrupt or incompatible with the requested configuration."""


class TrainingDiverged(ArithmeticError):
    """Loss became non-finite during optimisation."""
