"""Online learners used by edge agents: adaptive tree, drift detector, score."""

from .adwin import AdwinDetector
from .hoeffding import HoeffdingAdaptiveTree, best_split_gains, hoeffding_bound
from .score import PredictionScore, steps_to_threshold

__all__ = [
    "AdwinDetector",
    "HoeffdingAdaptiveTree",
    "PredictionScore",
    "best_split_gains",
    "hoeffding_bound",
    "steps_to_threshold",
]
