class TopKError(Exception):
    """Base class for every error raised by the library."""


class InvalidArgumentError(TopKError, ValueError):
    """Bad argument: out-of-range K, dimension mismatch, unknown name..."""


class TrainingError(TopKError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class ToleranceError(TopKError):
    """A numerical check exceeded its tolerance."""
