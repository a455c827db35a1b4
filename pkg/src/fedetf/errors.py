"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class LabelError(ValueError):
    """A class index falls outside ``[0, num_classes)``."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where only finite values are allowed."""


class EtfConstructionError(ValueError):
    pass


class SceneError(ValueError):
    """The requested client partition cannot be built from the dataset."""


class IdxError(ValueError):
    """Base class for IDX ingestion problems."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxError):
    """Declared dimensions disagree with the number of payload bytes."""


class IdxCountMismatchError(IdxError):
    """Image and label files declare different item counts."""


class AggregationError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, message, round_index=None, client_id=None, batch_index=None):
        self.round_index = round_index
        self.client_id = client_id
        self.batch_index = batch_index
        super().__init__(
            f"{message} (round={round_index}, client={client_id}, batch={batch_index})"
        )


class ConfigError(ValueError):
    """Carries every validation problem found in a configuration at once."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))
