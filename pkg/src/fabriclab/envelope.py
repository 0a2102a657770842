"""Versioned per-aggregate action bounds issued by the controller."""

from __future__ import annotations

from dataclasses import dataclass, field

DEFAULT_STALENESS_BOUND = 0.5  # seconds

WEIGHT_NAMES = ("thr", "lat", "loss", "sla", "act")


@dataclass(frozen=True)
class PolicyEnvelope:
    """Contract bounding every local action an edge agent may take.

    ``weights`` orders as (throughput, latency, loss, sla, action-change).
    ``stale`` is relative to simulated time, never wall clock.
    """

    aggregate_id: str
    version: int
    r_min: float  # bits/s
    r_max: float  # bits/s
    reroute_permitted: bool
    weights: tuple[float, float, float, float, float]
    issued_at: float  # sim-time seconds
    staleness_bound: float = DEFAULT_STALENESS_BOUND

    def __post_init__(self):
        if not 0.0 <= self.r_min <= self.r_max:
            raise ValueError(f"need 0 <= r_min <= r_max, got [{self.r_min}, {self.r_max}]")
        if len(self.weights) != 5 or any(w < 0 for w in self.weights):
            raise ValueError(f"weights must be 5 non-negative values, got {self.weights}")

    def stale(self, now: float) -> bool:
        return now - self.issued_at > self.staleness_bound

    def clip_rate(self, rate: float) -> float:
        return min(max(rate, self.r_min), self.r_max)

    def to_payload(self) -> dict:
        return {
            "aggregate_id": self.aggregate_id,
            "version": self.version,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "reroute_permitted": self.reroute_permitted,
            "weights": list(self.weights),
            "issued_at": self.issued_at,
            "staleness_bound": self.staleness_bound,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PolicyEnvelope":
        return cls(
            aggregate_id=payload["aggregate_id"],
            version=payload["version"],
            r_min=payload["r_min"],
            r_max=payload["r_max"],
            reroute_permitted=payload["reroute_permitted"],
            weights=tuple(payload["weights"]),
            issued_at=payload["issued_at"],
            staleness_bound=payload.get("staleness_bound", DEFAULT_STALENESS_BOUND),
        )


def bootstrap_envelope(aggregate_id: str, r_max: float, weights=None) -> PolicyEnvelope:
    """Permissive version-0 envelope an agent holds before the first push."""
    if weights is None:
        weights = (0.3, 0.2, 0.2, 0.2, 0.1)
    return PolicyEnvelope(
        aggregate_id=aggregate_id,
        version=0,
        r_min=0.0,
        r_max=r_max,
        reroute_permitted=False,
        weights=tuple(weights),
        issued_at=0.0,
    )
