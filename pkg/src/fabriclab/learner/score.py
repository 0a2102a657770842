"""Exponentially smoothed accuracy score driving the explore/execute switch."""

from __future__ import annotations

import math


class PredictionScore:
    """Moving average of 0/1 prediction correctness.

    p is updated as ``p <- beta * p + (1 - beta) * correct`` and stays in
    [0, 1]. The owner compares p against a threshold to decide when the
    model is trustworthy enough to act on.
    """

    def __init__(self, beta: float = 0.9, threshold: float = 0.8, initial: float = 0.5):
        if not 0.0 < beta < 1.0:
            raise ValueError(f"beta must be in (0,1), got {beta}")
        if not 0.0 <= initial <= 1.0:
            raise ValueError(f"initial score must be in [0,1], got {initial}")
        self.beta = beta
        self.threshold = threshold
        self.initial = initial
        self.p = initial

    def update(self, correct: bool) -> float:
        self.p = self.beta * self.p + (1.0 - self.beta) * (1.0 if correct else 0.0)
        return self.p

    def reset(self) -> None:
        self.p = self.initial

    @property
    def confident(self) -> bool:
        return self.p >= self.threshold

    def get_params(self) -> dict:
        return {"beta": self.beta, "threshold": self.threshold, "initial": self.initial}


def steps_to_threshold(p0: float, beta: float, threshold: float) -> int:
    """Consecutive correct updates needed to lift p from p0 to >= threshold.

    Closed form of iterating the update with correct=1:
    p_k = 1 - beta**k * (1 - p0).
    """
    if p0 >= threshold:
        return 0
    return math.ceil(math.log((1.0 - threshold) / (1.0 - p0)) / math.log(beta))
