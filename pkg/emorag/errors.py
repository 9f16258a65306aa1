class EmoragError(Exception):
    """Base for every error the package raises on purpose.

    `code` is the short machine-readable tag the CLI writes to stderr.
    """

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class DimensionError(EmoragError, ValueError):
    code = "dimension_mismatch"


class EmptyInputError(EmoragError, ValueError):
    code = "empty_input"


class NonFiniteError(EmoragError, ArithmeticError):
    code = "non_finite"


class ConfigError(EmoragError, ValueError):
    code = "invalid_config"


class CheckpointError(EmoragError, ValueError):
    code = "checkpoint"


class DatasetError(EmoragError, ValueError):
    code = "dataset"


class MissingModalityError(EmoragError, ValueError):
    code = "missing_modality"
