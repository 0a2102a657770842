"""Discrete per-interval action space: meter step, queue shift, reroute verb.

The joint action is flattened to a single class id so one classifier per
aggregate can be trained on it. All 27 combinations are encodable; state-
dependent validity (bounds, permissions, cooldowns) is the enforcer's job,
not the encoding's.
"""

from __future__ import annotations

from dataclasses import dataclass

REROUTE_HOLD = "hold"
REROUTE_TRIGGER = "trigger"
REROUTE_RELEASE = "release"
_REROUTE_ORDER = (REROUTE_HOLD, REROUTE_TRIGGER, REROUTE_RELEASE)

N_ACTION_CLASSES = 27


@dataclass(frozen=True)
class ActionVector:
    """One choice per action dimension for one control interval."""

    meter: int = 0  # -1 step down, 0 hold, +1 step up
    queue: int = 0  # -1 demote, 0 hold, +1 promote
    reroute: str = REROUTE_HOLD

    def __post_init__(self):
        if self.meter not in (-1, 0, 1):
            raise ValueError(f"meter step must be -1, 0 or +1, got {self.meter}")
        if self.queue not in (-1, 0, 1):
            raise ValueError(f"queue shift must be -1, 0 or +1, got {self.queue}")
        if self.reroute not in _REROUTE_ORDER:
            raise ValueError(f"unknown reroute verb {self.reroute!r}")

    def to_class(self) -> int:
        return (self.meter + 1) * 9 + (self.queue + 1) * 3 + _REROUTE_ORDER.index(self.reroute)

    @classmethod
    def from_class(cls, class_id: int) -> "ActionVector":
        if not 0 <= class_id < N_ACTION_CLASSES:
            raise ValueError(f"action class out of range: {class_id}")
        meter, rest = divmod(class_id, 9)
        queue, reroute = divmod(rest, 3)
        return cls(meter - 1, queue - 1, _REROUTE_ORDER[reroute])

    @property
    def is_noop(self) -> bool:
        return self.meter == 0 and self.queue == 0 and self.reroute == REROUTE_HOLD

    def dims_changed(self, other: "ActionVector") -> int:
        """Number of dimensions whose value differs from ``other`` (0-3)."""
        return (
            int(self.meter != other.meter)
            + int(self.queue != other.queue)
            + int(self.reroute != other.reroute)
        )

    def distance_to_noop(self) -> int:
        return self.dims_changed(NOOP)


NOOP = ActionVector()
NOOP_CLASS = NOOP.to_class()

# Single-dimension perturbations, the exploration candidate pool.
SINGLE_DIM_ACTIONS = (
    ActionVector(meter=+1),
    ActionVector(meter=-1),
    ActionVector(queue=+1),
    ActionVector(queue=-1),
    ActionVector(reroute=REROUTE_TRIGGER),
    ActionVector(reroute=REROUTE_RELEASE),
)
