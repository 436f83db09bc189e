# src/errors.py
from typing import Any, List, Optional


class PipelineError(Exception):
    """Base class for errors raised by the pipeline"""


class FormatError(PipelineError, ValueError):
    """A file does not conform to its declared format"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class ShapeError(PipelineError, ValueError):
    """Operands have incompatible shapes or dimensions"""


class ZeroRowError(PipelineError, ValueError):
    """A row (or column) has no mass and cannot be normalized"""

    def __init__(self, message: str, offender: Any = None):
        self.offender = offender
        super().__init__(message)


class ConvergenceError(PipelineError):
    """Sinkhorn iterations did not reach the requested tolerance"""

    def __init__(self, message: str, violation: float, round_index: Optional[int] = None):
        self.violation = violation
        self.round_index = round_index
        super().__init__(message)


class TrainingDivergedError(PipelineError):
    """A training loss became non-finite"""

    def __init__(self, message: str, epoch: int, batch: int, trace: Optional[List[Any]] = None):
        self.epoch = epoch
        self.batch = batch
        self.trace = trace or []
        super().__init__(message)


class InfeasibleSplitError(PipelineError, ValueError):
    """A held-out split cannot keep every test entity in training.

    `greedy_count` is how many triples the seeded greedy pass managed to hold
    out. It is a lower bound on the true maximum, not the maximum itself.
    """

    def __init__(self, message: str, greedy_count: int):
        self.greedy_count = greedy_count
        super().__init__(message)


class ConfigError(PipelineError, ValueError):
    """Run configuration is invalid; names the offending key path"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class StageError(PipelineError):
    """An error escaped a pipeline stage"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
