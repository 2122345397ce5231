"""Exception hierarchy shared by every prefrank module."""

from pathlib import Path
from typing import Optional, Union


class PrefRankError(Exception):
    """Base class for all errors raised by prefrank."""
    pass


class ConfigError(PrefRankError):
    """Raised when a run configuration is missing, malformed or invalid."""
    pass


class DataFormatError(PrefRankError):
    """Raised when an interaction file cannot be parsed."""

    def __init__(self, path: Union[str, Path], line_no: Optional[int], message: str):
        self.path = str(path)
        self.line_no = line_no
        location = f"{self.path}:{line_no}" if line_no is not None else self.path
        super().__init__(f"{location}: {message}")


class CorpusEliminatedError(PrefRankError):
    """Raised when k-core filtering removes every interaction."""

    def __init__(self, min_core: int):
        self.min_core = min_core
        super().__init__(f"corpus eliminated by k-core (min_core={min_core})")


class CorpusFormatError(PrefRankError):
    """Raised when a canonical corpus file has a bad header or body."""
    pass


class ShapeError(PrefRankError):
    """Raised when operands of a numeric primitive have incompatible shapes."""

    def __init__(self, op: str, left: tuple, right: tuple):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class NonFiniteError(PrefRankError):
    """Raised when NaN or Inf shows up in a tensor, gradient or loss."""

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        message = f"non-finite values in {where}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class TapeError(PrefRankError):
    """Raised when the gradient tape is used out of order."""
    pass


class SamplingError(PrefRankError):
    """Raised when no negative item exists for a user."""
    pass


class CheckpointError(PrefRankError):
    """Raised when a checkpoint is unreadable or incompatible with a corpus."""
    pass


class LockError(PrefRankError):
    """Raised when another process holds the output directory lock."""
    pass
