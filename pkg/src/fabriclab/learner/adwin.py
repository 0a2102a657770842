"""Adaptive-windowing change detector over a stream of 0/1 outcomes.

The window is kept as an exponential histogram: rows of buckets where row i
holds buckets summarizing 2**i outcomes, at most ``max_buckets`` buckets per
row. A change is signalled when some split of the window into (old, recent)
subwindows has means that differ beyond the confidence bound; the old part
is then discarded.
"""

from __future__ import annotations

import json
import math


class _Bucket:
    __slots__ = ("total", "variance")

    def __init__(self, total: float = 0.0, variance: float = 0.0):
        self.total = total
        self.variance = variance


class AdwinDetector:
    """Sliding window whose length adapts to the rate of change.

    Parameters
    ----------
    delta:
        Confidence for the cut test; smaller means fewer false alarms and
        slower detection.
    max_buckets:
        Buckets kept per row before two oldest are merged into the next row.
    """

    def __init__(self, delta: float = 0.002, max_buckets: int = 5):
        if not 0.0 < delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {delta}")
        self.delta = delta
        self.max_buckets = max_buckets
        # rows[i] is a list of buckets each covering 2**i outcomes, oldest first
        self._rows: list[list[_Bucket]] = [[]]
        self.width = 0
        self.total = 0.0
        self._variance_sum = 0.0  # sum of squared deviations over the window
        self.n_detections = 0
        # direction of the most recent cut: True if the retained (recent)
        # side had the higher mean, i.e. the monitored rate went up
        self.last_change_increased = False

    @property
    def mean(self) -> float:
        return self.total / self.width if self.width else 0.0

    @property
    def variance(self) -> float:
        return self._variance_sum / self.width if self.width else 0.0

    def add(self, outcome: float) -> bool:
        """Insert one outcome (typically 0 or 1); return True if a change
        was detected and the stale prefix of the window was dropped."""
        self._insert(float(outcome))
        return self._detect_and_shrink()

    # -- internals ---------------------------------------------------------

    def _insert(self, value: float) -> None:
        if self.width > 0:
            mu = self.total / self.width
            self._variance_sum += (value - mu) * (value - mu) * self.width / (self.width + 1)
        self.width += 1
        self.total += value
        self._rows[0].append(_Bucket(value, 0.0))
        self._compress()

    def _compress(self) -> None:
        row = 0
        while row < len(self._rows) and len(self._rows[row]) > self.max_buckets:
            buckets = self._rows[row]
            a, b = buckets.pop(0), buckets.pop(0)
            n = float(2 ** row)
            mu_a, mu_b = a.total / n, b.total / n
            merged = _Bucket(
                a.total + b.total,
                a.variance + b.variance + (mu_a - mu_b) ** 2 * n * n / (2 * n),
            )
            if row + 1 == len(self._rows):
                self._rows.append([])
            self._rows[row + 1].append(merged)
            row += 1

    def _iter_oldest_first(self):
        for row in range(len(self._rows) - 1, -1, -1):
            size = float(2 ** row)
            for bucket in self._rows[row]:
                yield row, bucket, size

    def _detect_and_shrink(self) -> bool:
        if self.width < 2:
            return False
        detected = False
        shrunk = True
        while shrunk:
            shrunk = False
            n0 = 0.0
            sum0 = 0.0
            n = float(self.width)
            total = self.total
            var = self.variance
            for _, bucket, size in self._iter_oldest_first():
                n0 += size
                sum0 += bucket.total
                n1 = n - n0
                if n0 < 1.0 or n1 < 1.0:
                    continue
                mu0 = sum0 / n0
                mu1 = (total - sum0) / n1
                if self._cut(n0, n1, mu0, mu1, var, n):
                    if not detected:
                        self.last_change_increased = mu1 > mu0
                    detected = True
                    self._drop_oldest()
                    shrunk = self.width > 2
                    break
        if detected:
            self.n_detections += 1
        return detected

    def _cut(self, n0: float, n1: float, mu0: float, mu1: float, var: float, n: float) -> bool:
        delta_prime = self.delta / math.log(n) if n > math.e else self.delta
        m = 1.0 / (1.0 / n0 + 1.0 / n1)
        eps = math.sqrt((2.0 / m) * var * math.log(2.0 / delta_prime)) + (
            2.0 / (3.0 * m)
        ) * math.log(2.0 / delta_prime)
        return abs(mu0 - mu1) > eps

    def _drop_oldest(self) -> None:
        for row in range(len(self._rows) - 1, -1, -1):
            if self._rows[row]:
                bucket = self._rows[row].pop(0)
                size = float(2 ** row)
                mu = bucket.total / size
                self.width -= int(size)
                self.total -= bucket.total
                if self.width > 0:
                    mu_rest = self.total / self.width
                    dec = bucket.variance + size * self.width / (size + self.width) * (
                        mu - mu_rest
                    ) ** 2
                    self._variance_sum = max(0.0, self._variance_sum - dec)
                else:
                    self._variance_sum = 0.0
                while len(self._rows) > 1 and not self._rows[-1]:
                    self._rows.pop()
                return

    # -- estimator-style surface -------------------------------------------

    def get_params(self) -> dict:
        return {"delta": self.delta, "max_buckets": self.max_buckets}

    def to_blob(self) -> bytes:
        state = {
            "delta": self.delta,
            "max_buckets": self.max_buckets,
            "rows": [[[b.total, b.variance] for b in row] for row in self._rows],
            "width": self.width,
            "total": self.total,
            "variance_sum": self._variance_sum,
            "n_detections": self.n_detections,
        }
        return b"\x01" + json.dumps(state, sort_keys=True).encode()

    @classmethod
    def from_blob(cls, blob: bytes) -> "AdwinDetector":
        if not blob or blob[0] != 1:
            raise ValueError("unsupported detector blob version")
        state = json.loads(blob[1:].decode())
        det = cls(delta=state["delta"], max_buckets=state["max_buckets"])
        det._rows = [[_Bucket(t, v) for t, v in row] for row in state["rows"]]
        det.width = state["width"]
        det.total = state["total"]
        det._variance_sum = state["variance_sum"]
        det.n_detections = state["n_detections"]
        return det
