class TistError(Exception):
    """Base class for package errors."""


class InvalidInputError(TistError):
    """Input arrays or arguments violate an operation's preconditions."""


class InvalidConfigError(TistError):
    """Configuration value outside its legal domain."""


class LabelWithheldError(TistError):
    """Attempt to read a label that is hidden from the training loop."""


class TrainingDiverged(TistError):
    """Non-finite loss encountered; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
