class ConfigError(ValueError):
    """Invalid configuration or invalid arguments to a pipeline command."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite; carries a dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
