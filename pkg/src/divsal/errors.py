"""Exception types raised across the package."""


class DivsalError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DivsalError, ValueError):
    pass


class GenerationError(DivsalError):
    pass


class DatasetError(DivsalError):
    """Malformed dataset directory. ``sample_id`` names the offending sample when known."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class NumericError(DivsalError, ArithmeticError):
    pass


class CheckpointError(DivsalError):
    pass


class MissingPredictionError(DivsalError):
    def __init__(self, missing_ids):
        self.missing_ids = list(missing_ids)
        preview = ", ".join(self.missing_ids[:10])
        more = "" if len(self.missing_ids) <= 10 else f" (+{len(self.missing_ids) - 10} more)"
        super().__init__(f"missing predictions for {len(self.missing_ids)} sample(s): {preview}{more}")
