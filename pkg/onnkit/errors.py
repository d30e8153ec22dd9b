"""Exception hierarchy shared by the engine and the CLI"""
from typing import Any, List, Optional, Tuple


class ONNError(Exception):
    """Base class for every onnkit failure"""


class ShapeError(ONNError, ValueError):
    """Dimension or channel mismatch; the message names the offending dims"""


class OperatorError(ONNError, ValueError):
    """Invalid operator id, set index or non-finite operator input"""


class CacheError(ONNError, ValueError):
    """BP requested caches that no training-mode forward pass recorded"""


class DatasetError(ONNError, ValueError):
    """Unreadable, missing or inconsistent dataset"""


class NumericalError(ONNError, ArithmeticError):
    """Non-finite value produced inside the network"""

    def __init__(self, message: str, location: Optional[Tuple[int, ...]] = None):
        super().__init__(message)
        self.location = location


class TrainingDivergedError(NumericalError):
    """Non-finite loss, activation or sensitivity during BP training"""

    def __init__(
        self,
        iteration: int,
        history: Optional[List[Any]] = None,
        reason: str = "non-finite loss",
    ):
        super().__init__(f"Training diverged at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.history = history or []
