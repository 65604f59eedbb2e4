"""Exception hierarchy shared across the package."""


class LabError(Exception):
    """Base class for every error raised by unlearnlab."""


class ContractViolation(LabError, ValueError):
    """A caller broke a precondition (shape mismatch, empty batch, bad range)."""


class LoadError(LabError):
    """Dataset file could not be parsed."""


class BadMagicError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class CountMismatchError(LoadError):
    pass


class ParseError(LoadError):
    """CSV content problem; carries the offending row index when known."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class PartitionError(LabError):
    pass


class AggregationError(LabError):
    pass


class UnresolvableRequestError(LabError):
    """Forget-set example not found in the requesting client's shard."""


class EmptySelectionError(LabError):
    """No training example has a negative influence score on the target."""


class ReportError(LabError):
    pass


class StageError(LabError):
    """Wraps a failure inside one pipeline stage of an experiment."""

    codes = {"config": 2, "data": 3, "train": 4, "unlearn": 5, "attack": 6,
             "defend": 7, "evaluate": 8, "report": 9}

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return self.codes.get(self.stage, 1)
