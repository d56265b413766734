"""Invariant risk minimization with total-variation penalties, on a small numpy autodiff core."""

from .objectives import Method
from .risk import LossKind
from .trainer import TrainConfig, TrainResult, evaluate, train

__all__ = ["LossKind", "Method", "TrainConfig", "TrainResult", "evaluate", "train"]
__version__ = "0.1.0"
