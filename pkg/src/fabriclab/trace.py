"""Seed-reproducible event/metric log consumed by experiments and audits.

Records are newline-delimited JSON objects with sorted keys and compact
separators; identical (seed, scenario) inputs produce byte-identical files.
Every record carries ``k`` (kind) and ``t`` (sim-time seconds). Interval
metric samples can also be exported as CSV with a fixed, documented header.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json

EVENT_KINDS = frozenset(
    {
        "trial",  # one header record: seed, scenario digest, scheme
        "flow_start",
        "flow_end",
        "action",  # executed switch action (incl. canary / rollback entries)
        "envelope",  # envelope pushed by the controller
        "alert",  # bottleneck alert raised / cleared
        "arbitration",
        "override",
        "msg_drop",
        "msg_outage",
        "interval",  # per-interval metric summary sample
        "link_totals",  # per-link cumulative counters at trial end
        "telemetry_gap",
    }
)

METRIC_CSV_HEADER = (
    "t_s,mean_core_util,max_core_util,p99_delay_s,sla_violation_frac,"
    "queued_bytes,active_flows,throughput_bps"
)


def encode_record(record: dict) -> str:
    kind = record.get("k")
    if kind not in EVENT_KINDS:
        raise ValueError(f"unknown trace record kind: {kind!r}")
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def decode_record(line: str) -> dict:
    return json.loads(line)


class TraceRecorder:
    """Accumulates typed records in event order; serializes deterministically."""

    def __init__(self):
        self._lines: list[str] = []
        self._last_t = float("-inf")

    def record(self, kind: str, t: float, **fields) -> None:
        if t < self._last_t - 1e-12:
            raise ValueError(f"event time went backwards: {t} after {self._last_t}")
        self._last_t = max(self._last_t, t)
        fields["k"] = kind
        fields["t"] = round(t, 9)
        self._lines.append(encode_record(fields))

    def __len__(self) -> int:
        return len(self._lines)

    def to_bytes(self) -> bytes:
        buf = io.StringIO()
        for line in self._lines:
            buf.write(line)
            buf.write("\n")
        return buf.getvalue().encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def write(self, path, compress: bool = True) -> None:
        data = self.to_bytes()
        path = str(path)
        if compress:
            # mtime pinned to zero so equal content gives equal bytes on disk
            with open(path, "wb") as raw:
                with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, compresslevel=6) as gz:
                    gz.write(data)
        else:
            with open(path, "wb") as fh:
                fh.write(data)

    def iter_records(self):
        for line in self._lines:
            yield decode_record(line)


def read_trace(path) -> list[dict]:
    path = str(path)
    if path.endswith(".gz"):
        with gzip.open(path, "rt") as fh:
            return [decode_record(line) for line in fh if line.strip()]
    with open(path) as fh:
        return [decode_record(line) for line in fh if line.strip()]


def interval_samples_csv(records) -> str:
    """Render ``interval`` records as CSV under the documented header."""
    rows = [METRIC_CSV_HEADER]
    for rec in records:
        if rec.get("k") != "interval":
            continue
        rows.append(
            f'{rec["t"]},{rec["util_mean"]},{rec["util_max"]},{rec["p99_delay"]},'
            f'{rec["sla_frac"]},{rec["queued"]},{rec["flows"]},{rec["thr"]}'
        )
    return "\n".join(rows) + "\n"
