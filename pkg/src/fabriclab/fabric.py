"""Fluid-model fabric kernel.

Traffic is advanced one control interval at a time. Each interval, flows
emit bytes onto their aggregate's legs (rate-capped by meters), and links
are processed in stage order (tor->agg, agg->spine, spine->agg, agg->tor).
At each link, queued plus newly arrived bytes compete for ``capacity * dt``
service: priority buckets share by configurable weights, and legs inside a
bucket share max-min fair. Serviced bytes move to the next hop within the
same interval; the backlog beyond the buffer is dropped, lowest priority
first. Bytes leaving the last hop are delivered to flows proportionally to
their in-flight balances, so ``sent == delivered + dropped`` holds exactly
for every flow once queues drain.

Single-threaded and deterministic: all randomness comes from seeded
generators owned by the kernel.
"""

from __future__ import annotations

import math
import random
import zlib
from dataclasses import dataclass, field

from .actions import ActionVector, NOOP_CLASS, REROUTE_HOLD, REROUTE_RELEASE, REROUTE_TRIGGER
from .topology import Topology, TopologyConfig, build_clos

EPS_NUM = 1e-9  # relative-change denominators
BYTE_EPS = 1e-6  # byte bookkeeping tolerance
MSS = 1500.0  # bytes per segment for reordering accounting

QUEUE_LEVELS = (0, 1, 2)
SLA_BUDGETS = {"bulk": math.inf, "latency_sensitive": 0.010}  # one-way seconds


def max_min_allocate(demands: list[float], capacity: float) -> list[float]:
    """Max-min fair shares of ``capacity`` subject to per-entity demand caps."""
    n = len(demands)
    alloc = [0.0] * n
    if n == 0 or capacity <= 0.0:
        return alloc
    active = [i for i in range(n) if demands[i] > 0.0]
    remaining = capacity
    while active and remaining > 1e-12 * capacity:
        share = remaining / len(active)
        capped = [i for i in active if demands[i] - alloc[i] <= share]
        if capped:
            for i in capped:
                remaining -= demands[i] - alloc[i]
                alloc[i] = demands[i]
            active = [i for i in active if i not in capped]
        else:
            for i in active:
                alloc[i] += share
            remaining = 0.0
    return alloc


@dataclass
class StateVector:
    """Telemetry observation for one aggregate at one interval."""

    util: float  # bottleneck link utilization, [0,1]
    q: float  # bottleneck queue occupancy, bytes
    loss: float  # dropped/(delivered+dropped) this interval
    ecn: float  # bottleneck marking indicator
    thr: float  # delivered rate, bits/s
    delay: float  # one-way path delay incl. queueing, seconds
    d_util: float
    d_thr: float
    d_delay: float
    a_prev: int  # last executed action class
    a_prev2: int
    v: int  # 1 iff delay exceeded the class SLA budget

    def features(self) -> list[float]:
        return [
            self.util,
            self.q,
            self.loss,
            self.ecn,
            self.thr,
            self.delay,
            self.d_util,
            self.d_thr,
            self.d_delay,
            float(self.a_prev),
            float(self.a_prev2),
        ]


def relative_change(current: float, previous: float) -> float:
    return (current - previous) / max(previous, EPS_NUM)


@dataclass
class FlowSpec:
    id: int
    src_rack: int
    dst_rack: int
    size: float  # bytes
    start_time: float
    cls: str = "bulk"
    tenant_id: int = 0
    paced_rate: float | None = None  # bits/s cap, None -> host rate

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"flow size must be positive, got {self.size}")
        if self.start_time < 0:
            raise ValueError("start_time must be >= 0")
        if self.cls not in SLA_BUDGETS:
            raise ValueError(f"unknown service class {self.cls!r}")


class _Flow:
    __slots__ = (
        "spec",
        "sent",
        "delivered",
        "dropped",
        "rate_cap",
        "canary",
        "path_idx",
        "stripe_paths",
        "cell_offset",
        "done",
    )

    def __init__(self, spec: FlowSpec, canary: bool):
        self.spec = spec
        self.sent = 0.0
        self.delivered = 0.0
        self.dropped = 0.0
        self.rate_cap = spec.paced_rate  # None -> host rate
        self.canary = canary
        self.path_idx: int | None = None  # per-flow path pin (multipath schemes)
        self.stripe_paths: list[int] | None = None  # flowcell striping targets
        self.cell_offset = 0  # striping start offset
        self.done = False

    @property
    def in_flight(self) -> float:
        return self.sent - self.delivered - self.dropped

    @property
    def remaining_to_emit(self) -> float:
        return self.spec.size - (self.sent - self.dropped)


@dataclass
class CanaryState:
    """Probe configuration applied to the canary leg only."""

    action: ActionVector
    path_idx: int
    queue_level: int
    cap_multiplier: float  # relative to the canary's share of the meter


class _Leg:
    """Allocation entity: a subset of an aggregate's traffic on one path."""

    __slots__ = (
        "key",
        "agg_id",
        "path",
        "prio",
        "delivered_this",
        "dropped_this",
        "delivered_total",
    )

    def __init__(self, key: str, agg_id: str, path: tuple[str, ...], prio: int):
        self.key = key
        self.agg_id = agg_id
        self.path = path
        self.prio = prio
        self.delivered_this = 0.0
        self.dropped_this = 0.0
        self.delivered_total = 0.0


class PathAggregate:
    """Unit of observation and control: one (tenant, rack pair, class)."""

    def __init__(self, agg_id: str, tenant: int, src: int, dst: int, cls: str, paths, home_idx):
        self.id = agg_id
        self.tenant_id = tenant
        self.src_rack = src
        self.dst_rack = dst
        self.cls = cls
        self.candidate_paths: list[tuple[str, ...]] = paths
        self.home_path_idx = home_idx
        self.current_path_idx = home_idx
        self.flows: dict[int, _Flow] = {}
        self.meter_cap: float = math.inf
        self.queue_level: int = 1
        self.canary: CanaryState | None = None
        self.last_reroute_time: float = -math.inf
        # telemetry history (previous interval) for delta features
        self.prev_main: tuple[float, float, float] | None = None  # util, thr, delay
        self.prev_canary: tuple[float, float, float] | None = None
        self.action_history: tuple[int, int] = (NOOP_CLASS, NOOP_CLASS)
        # counters
        self.delivered_bytes = 0.0
        self.dropped_bytes = 0.0
        self.sent_bytes = 0.0
        self.ooo_segments = 0
        self.interval_delivered_main = 0.0
        self.interval_delivered_canary = 0.0
        self.interval_dropped = 0.0

    @property
    def current_path(self) -> tuple[str, ...]:
        return self.candidate_paths[self.current_path_idx]

    def demand_rate(self, host_rate: float) -> float:
        total = 0.0
        for flow in self.flows.values():
            total += flow.rate_cap if flow.rate_cap is not None else host_rate
        return total


@dataclass
class FabricConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    interval: float = 0.050  # seconds
    meter_step_alpha: float = 0.10
    canary_fraction: float = 0.10
    ecn_threshold: float = 0.30  # fraction of buffer
    scheduler_weights: tuple[float, float, float] = (1.0, 4.0, 16.0)  # prio 0,1,2
    action_latency: tuple = ("constant", 0.002)  # seconds; or ("uniform", lo, hi)
    telemetry_loss_prob: float = 0.0
    seed: int = 0


class SwitchActionError(ValueError):
    pass


class FabricSim:
    def __init__(self, config: FabricConfig, trace=None):
        self.config = config
        self.topology: Topology = build_clos(config.topology)
        self.trace = trace
        self.now = 0.0
        self.tick = 0
        self.aggregates: dict[str, PathAggregate] = {}
        self.legs: dict[str, _Leg] = {}
        # per directed link: queues[prio][leg_key] = bytes
        self.queues: dict[str, list[dict[str, float]]] = {
            lid: [{}, {}, {}] for lid in self.topology.links
        }
        self.queue_totals: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        # cumulative per-link counters
        self.served_bytes: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        self.goodput_bytes: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        self.dropped_bytes: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        self.ecn_marks: dict[str, int] = {lid: 0 for lid in self.topology.links}
        # per-interval link samples
        self.link_util: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        self.link_loss: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        self.link_ecn: dict[str, int] = {lid: 0 for lid in self.topology.links}
        self.link_served_this: dict[str, float] = {lid: 0.0 for lid in self.topology.links}
        self.flowcell_bytes: float = 64 * 1024.0  # striping cell size
        self._pending_flows: list[FlowSpec] = []
        self._pending_idx = 0
        self._pending_actions: list = []
        self.fct_samples: list[tuple[float, str, float, float]] = []  # size, cls, fct, start
        self.action_latencies: list[float] = []
        self._latency_rng = random.Random(zlib.crc32(f"latency:{config.seed}".encode()))
        self._telemetry_rng = random.Random(zlib.crc32(f"telemetry:{config.seed}".encode()))
        self._stage_order = sorted(
            self.topology.links, key=lambda lid: (self.topology.links[lid].stage, lid)
        )
        self.flows_completed = 0
        self.flows_started = 0

    # -- workload -------------------------------------------------------------

    def load_flows(self, specs: list[FlowSpec]) -> None:
        """Queue flow arrivals; must be sorted by start time."""
        self._pending_flows = sorted(specs, key=lambda s: (s.start_time, s.id))
        self._pending_idx = 0

    def aggregate_id_for(self, spec: FlowSpec) -> str:
        cls_code = "ls" if spec.cls == "latency_sensitive" else "b"
        return f"t{spec.tenant_id}:{spec.src_rack}-{spec.dst_rack}:{cls_code}"

    def _get_aggregate(self, spec: FlowSpec) -> PathAggregate:
        agg_id = self.aggregate_id_for(spec)
        agg = self.aggregates.get(agg_id)
        if agg is None:
            paths = self.topology.candidate_paths(spec.src_rack, spec.dst_rack)
            if not paths:
                raise ValueError(f"no fabric path for intra-rack flow {spec.id}")
            home = zlib.crc32(agg_id.encode()) % len(paths)
            agg = PathAggregate(
                agg_id, spec.tenant_id, spec.src_rack, spec.dst_rack, spec.cls, paths, home
            )
            self.aggregates[agg_id] = agg
        return agg

    def _admit_flows(self, t_end: float, on_flow_start=None) -> None:
        pending = self._pending_flows
        while self._pending_idx < len(pending) and pending[self._pending_idx].start_time < t_end:
            spec = pending[self._pending_idx]
            self._pending_idx += 1
            agg = self._get_aggregate(spec)
            canary = (zlib.crc32(f"canary:{spec.id}".encode()) % 1000) < int(
                self.config.canary_fraction * 1000
            )
            flow = _Flow(spec, canary)
            agg.flows[spec.id] = flow
            self.flows_started += 1
            if self.trace is not None:
                self.trace.record(
                    "flow_start",
                    spec.start_time,
                    flow=spec.id,
                    agg=agg.id,
                    size=spec.size,
                    cls=spec.cls,
                )
            if on_flow_start is not None:
                on_flow_start(agg, flow)

    # -- legs ------------------------------------------------------------------

    def _leg(self, agg: PathAggregate, tag: str, path_idx: int, prio: int) -> _Leg:
        key = f"{agg.id}|{tag}"
        leg = self.legs.get(key)
        path = agg.candidate_paths[path_idx]
        if leg is None:
            leg = _Leg(key, agg.id, path, prio)
            self.legs[key] = leg
        else:
            leg.path = path
            leg.prio = prio
        return leg

    # -- switch actions -----------------------------------------------------------

    def draw_action_latency(self) -> float:
        spec = self.config.action_latency
        if spec[0] == "constant":
            return float(spec[1])
        if spec[0] == "uniform":
            return self._latency_rng.uniform(spec[1], spec[2])
        raise ValueError(f"unknown action latency distribution {spec[0]!r}")

    def apply_switch_action(
        self,
        agg_id: str,
        action: ActionVector,
        r_min: float = 0.0,
        r_max: float = math.inf,
        canary: bool = False,
        target_path_idx: int | None = None,
        issue_time: float | None = None,
        actor: str = "",
        extra: dict | None = None,
    ) -> dict:
        """Execute one action; returns the applied-action record.

        The caller is responsible for policy (envelope clipping, cooldowns);
        this is mechanism only. ``r_min``/``r_max`` are the clamp bounds that
        accompany the action record.
        """
        agg = self.aggregates.get(agg_id)
        if agg is None:
            raise SwitchActionError(f"unknown aggregate {agg_id!r}")
        latency = self.draw_action_latency()
        issued = self.now if issue_time is None else issue_time
        record = {
            "agg": agg_id,
            "action": action.to_class(),
            "meter": action.meter,
            "queue": action.queue,
            "reroute": action.reroute,
            "canary": canary,
            "latency": round(latency, 9),
            "actor": actor,
            "issued": round(issued, 9),
        }
        if extra:
            record.update(extra)
        self.action_latencies.append(latency)

        if canary:
            self._apply_canary(agg, action, target_path_idx, record)
        else:
            self._apply_main(agg, action, r_min, r_max, target_path_idx, record)
        if not canary:
            agg.action_history = (action.to_class(), agg.action_history[0])
        if self.trace is not None:
            self.trace.record("action", self.now, **record)
        return record

    def _apply_main(self, agg, action, r_min, r_max, target_path_idx, record) -> None:
        if action.meter != 0:
            base = agg.meter_cap
            if math.isinf(base):
                base = r_max if not math.isinf(r_max) else self.config.topology.host_rate
            stepped = base * (1.0 + self.config.meter_step_alpha * action.meter)
            agg.meter_cap = min(max(stepped, r_min), r_max)
        elif agg.meter_cap != math.inf and not (r_min <= agg.meter_cap <= r_max):
            # bounds moved underneath the current cap: clamp in place
            agg.meter_cap = min(max(agg.meter_cap, r_min), r_max)
        record["post_cap"] = agg.meter_cap if not math.isinf(agg.meter_cap) else -1.0

        if action.queue != 0:
            agg.queue_level = min(max(agg.queue_level + action.queue, QUEUE_LEVELS[0]), QUEUE_LEVELS[-1])
        record["post_queue"] = agg.queue_level

        if action.reroute == REROUTE_TRIGGER:
            if target_path_idx is None:
                raise SwitchActionError("reroute trigger needs a target path")
            if not 0 <= target_path_idx < len(agg.candidate_paths):
                raise SwitchActionError(
                    f"target path {target_path_idx} not a candidate for {agg.id}"
                )
            self._reroute(agg, target_path_idx)
        elif action.reroute == REROUTE_RELEASE:
            if agg.current_path_idx != agg.home_path_idx:
                self._reroute(agg, agg.home_path_idx)
        record["post_path"] = agg.current_path_idx

    def _apply_canary(self, agg, action, target_path_idx, record) -> None:
        path_idx = agg.current_path_idx
        level = agg.queue_level
        cap_mult = 1.0
        if action.meter != 0:
            cap_mult = 1.0 + self.config.meter_step_alpha * action.meter
        if action.queue != 0:
            level = min(max(level + action.queue, QUEUE_LEVELS[0]), QUEUE_LEVELS[-1])
        if action.reroute == REROUTE_TRIGGER:
            if target_path_idx is None or not 0 <= target_path_idx < len(agg.candidate_paths):
                raise SwitchActionError(f"bad canary reroute target for {agg.id}")
            path_idx = target_path_idx
        elif action.reroute == REROUTE_RELEASE:
            path_idx = agg.home_path_idx
        agg.canary = CanaryState(action, path_idx, level, cap_mult)
        agg.prev_canary = None  # new probe: delta baseline resets
        record["post_path"] = agg.current_path_idx

    def apply_restore(
        self,
        agg_id: str,
        meter_cap: float | None = None,
        queue_level: int | None = None,
        path_idx: int | None = None,
        r_min: float = 0.0,
        r_max: float = math.inf,
        actor: str = "",
        extra: dict | None = None,
    ) -> dict:
        """Restore recorded pre-action values exactly (rollback mechanism).

        Restored values are still clamped to the supplied bounds; restoring
        a path counts as a reroute for reordering accounting.
        """
        agg = self.aggregates.get(agg_id)
        if agg is None:
            raise SwitchActionError(f"unknown aggregate {agg_id!r}")
        latency = self.draw_action_latency()
        self.action_latencies.append(latency)
        record = {
            "agg": agg_id,
            "rollback": True,
            "canary": False,
            "meter": 0,
            "queue": 0,
            "reroute": REROUTE_HOLD,
            "latency": round(latency, 9),
            "actor": actor,
            "issued": round(self.now, 9),
        }
        if extra:
            record.update(extra)
        if meter_cap is not None:
            agg.meter_cap = min(max(meter_cap, r_min), r_max)
            record["meter"] = 1  # counts as this interval's meter update
        if queue_level is not None:
            agg.queue_level = min(max(queue_level, QUEUE_LEVELS[0]), QUEUE_LEVELS[-1])
            record["queue"] = 1
        if path_idx is not None and path_idx != agg.current_path_idx:
            if not 0 <= path_idx < len(agg.candidate_paths):
                raise SwitchActionError(f"bad restore path for {agg_id}")
            self._reroute(agg, path_idx)
            record["reroute"] = REROUTE_TRIGGER
        record["post_cap"] = agg.meter_cap if not math.isinf(agg.meter_cap) else -1.0
        record["post_queue"] = agg.queue_level
        record["post_path"] = agg.current_path_idx
        record["action"] = NOOP_CLASS
        if self.trace is not None:
            self.trace.record("action", self.now, **record)
        return record

    def end_canary(self, agg_id: str) -> None:
        agg = self.aggregates.get(agg_id)
        if agg is None:
            raise SwitchActionError(f"unknown aggregate {agg_id!r}")
        agg.canary = None
        agg.prev_canary = None

    def _reroute(self, agg: PathAggregate, new_idx: int) -> None:
        if new_idx == agg.current_path_idx:
            return
        old_path = agg.current_path
        new_path = agg.candidate_paths[new_idx]
        # in-flight bytes still on the old path may be overtaken on a faster one
        in_flight = sum(f.in_flight for f in agg.flows.values())
        if in_flight > 0 and self.path_delay(new_path, agg.queue_level) < self.path_delay(
            old_path, agg.queue_level
        ):
            agg.ooo_segments += int(in_flight / MSS)
        agg.current_path_idx = new_idx
        agg.last_reroute_time = self.now

    # -- the interval step -----------------------------------------------------------

    def advance(self, interval: float | None = None, on_flow_start=None) -> None:
        """Move traffic forward one control interval."""
        dt = self.config.interval if interval is None else interval
        if dt <= 0:
            raise ValueError("interval must be positive")
        t_start = self.now
        t_end = t_start + dt
        self._admit_flows(t_end, on_flow_start)
        emissions = self._emit(t_start, t_end)
        self._propagate(emissions, dt)
        self._complete_flows(t_start, dt)
        self.now = t_end
        self.tick += 1

    def _emit(self, t_start: float, t_end: float) -> dict[str, float]:
        """Source bytes for this interval, returning per-leg emitted bytes."""
        host_rate = self.config.topology.host_rate
        dt = t_end - t_start
        emissions: dict[str, float] = {}
        frac = self.config.canary_fraction
        for agg in self.aggregates.values():
            if not agg.flows:
                continue
            desired: list[float] = []
            flows = list(agg.flows.values())
            for flow in flows:
                window = min(dt, t_end - flow.spec.start_time)
                if window <= 0:
                    desired.append(0.0)
                    continue
                rate = flow.rate_cap if flow.rate_cap is not None else host_rate
                desired.append(max(0.0, min(rate * window / 8.0, flow.remaining_to_emit)))
            total = sum(desired)
            if total <= 0.0:
                continue
            canary_active = agg.canary is not None
            if canary_active and not any(f.canary for f in flows):
                # small aggregate with no hash-selected canary flows: promote
                # the min-hash flow so probes always observe something
                promoted = min(
                    flows, key=lambda f: zlib.crc32(f"canary:{f.spec.id}".encode())
                )
                promoted.canary = True
            # meter caps in bytes for this interval, split across main/canary
            if math.isinf(agg.meter_cap):
                cap_main = cap_canary = math.inf
            else:
                cap_bytes = agg.meter_cap * dt / 8.0
                if canary_active:
                    cap_canary = cap_bytes * frac * agg.canary.cap_multiplier
                    cap_main = cap_bytes * (1.0 - frac)
                else:
                    cap_main, cap_canary = cap_bytes, 0.0
            main_total = canary_total = 0.0
            main_amounts: dict[str, float] = {}
            striped: list[tuple[_Flow, float]] = []
            for flow, want in zip(flows, desired):
                if want <= 0.0:
                    continue
                if canary_active and flow.canary:
                    canary_total += want
                elif flow.stripe_paths:
                    striped.append((flow, want))
                    main_total += want
                elif flow.path_idx is not None:
                    tag = f"p{flow.path_idx}"
                    main_amounts[tag] = main_amounts.get(tag, 0.0) + want
                    main_total += want
                else:
                    main_amounts["m"] = main_amounts.get("m", 0.0) + want
                    main_total += want
            scale_main = min(1.0, cap_main / main_total) if main_total > 0 else 0.0
            scale_canary = min(1.0, cap_canary / canary_total) if canary_total > 0 else 0.0
            for flow, want in zip(flows, desired):
                if want <= 0.0:
                    continue
                scale = scale_canary if (canary_active and flow.canary) else scale_main
                emitted = want * scale
                flow.sent += emitted
                agg.sent_bytes += emitted
            for flow, want in striped:
                if scale_main <= 0.0:
                    break
                for idx, amount in self._stripe_cells(flow, want * scale_main):
                    tag = f"p{idx}"
                    main_amounts[tag] = main_amounts.get(tag, 0.0) + amount
            for tag, amount in main_amounts.items():
                if amount <= 0.0 or scale_main <= 0.0:
                    continue
                idx = int(tag[1:]) if tag.startswith("p") else agg.current_path_idx
                leg = self._leg(agg, tag, idx, agg.queue_level)
                key = leg.key
                emissions[key] = emissions.get(key, 0.0) + amount * scale_main
            if canary_active and canary_total > 0 and scale_canary > 0.0:
                leg = self._leg(agg, "c", agg.canary.path_idx, agg.canary.queue_level)
                emissions[leg.key] = emissions.get(leg.key, 0.0) + canary_total * scale_canary
        return emissions

    def _stripe_cells(self, flow: _Flow, amount: float) -> list[tuple[int, float]]:
        """Split ``amount`` emitted bytes across stripe paths in fixed-size
        flowcells, continuing from the flow's running cell cursor."""
        cell = self.flowcell_bytes
        paths = flow.stripe_paths
        out: dict[int, float] = {}
        cursor = flow.cell_offset
        remaining = amount
        while remaining > BYTE_EPS:
            cell_idx = int(cursor // cell)
            room = cell - (cursor - cell_idx * cell)
            take = min(room, remaining)
            path = paths[cell_idx % len(paths)]
            out[path] = out.get(path, 0.0) + take
            cursor += take
            remaining -= take
        flow.cell_offset = cursor
        return sorted(out.items())

    def _propagate(self, emissions: dict[str, float], dt: float) -> None:
        links = self.topology.links
        weights = self.config.scheduler_weights
        # reset per-interval aggregate/leg counters
        for agg in self.aggregates.values():
            agg.interval_delivered_main = 0.0
            agg.interval_delivered_canary = 0.0
            agg.interval_dropped = 0.0
        for leg in self.legs.values():
            leg.delivered_this = 0.0
            leg.dropped_this = 0.0
        # arrivals[link][leg_key] = bytes landing this interval
        arrivals: dict[str, dict[str, float]] = {}
        for key, amount in emissions.items():
            leg = self.legs[key]
            first = leg.path[0]
            arrivals.setdefault(first, {})[key] = arrivals.get(first, {}).get(key, 0.0) + amount

        interval_drops: dict[str, float] = {}
        for lid in self._stage_order:
            link = links[lid]
            queue = self.queues[lid]
            arrived = arrivals.get(lid)
            if arrived:
                for key, amount in arrived.items():
                    prio = self.legs[key].prio
                    bucket = queue[prio]
                    bucket[key] = bucket.get(key, 0.0) + amount
            total_q = sum(sum(b.values()) for b in queue)
            if total_q <= BYTE_EPS:
                self.queue_totals[lid] = 0.0
                self.link_util[lid] = 0.0
                self.link_loss[lid] = 0.0
                self.link_ecn[lid] = 0
                self.link_served_this[lid] = 0.0
                continue
            cap_bytes = link.capacity * dt / 8.0
            served = self._serve_link(lid, queue, cap_bytes, weights, arrivals)
            # tail drop beyond the buffer, lowest priority first
            dropped = 0.0
            total_q = sum(sum(b.values()) for b in queue)
            if total_q > link.buffer_bytes:
                overflow = total_q - link.buffer_bytes
                dropped = overflow
                for prio in QUEUE_LEVELS:
                    bucket = queue[prio]
                    if overflow <= BYTE_EPS or not bucket:
                        continue
                    bucket_total = sum(bucket.values())
                    take = min(bucket_total, overflow)
                    ratio = take / bucket_total
                    for key in list(bucket):
                        amount = bucket[key] * ratio
                        if amount > 0:
                            self._credit_drop(key, amount)
                        bucket[key] -= amount
                        if bucket[key] <= BYTE_EPS:
                            del bucket[key]
                    overflow -= take
                total_q = link.buffer_bytes
            self.queue_totals[lid] = total_q
            self.served_bytes[lid] += served
            self.dropped_bytes[lid] += dropped
            self.link_served_this[lid] = served
            self.link_util[lid] = min(1.0, served / cap_bytes) if cap_bytes > 0 else 0.0
            denom = served + dropped
            self.link_loss[lid] = dropped / denom if denom > 0 else 0.0
            marked = total_q > self.config.ecn_threshold * link.buffer_bytes
            self.link_ecn[lid] = 1 if marked else 0
            if marked:
                self.ecn_marks[lid] += 1
            if dropped > 0:
                interval_drops[lid] = dropped

        # attribute end-to-end goodput to every hop of the delivering legs
        for leg in self.legs.values():
            if leg.delivered_this > 0.0:
                for lid in leg.path:
                    self.goodput_bytes[lid] += leg.delivered_this

        # striping reordering: one flow delivering over paths with unequal
        # delays receives later-sent cells before earlier ones
        by_agg: dict[str, list[_Leg]] = {}
        for leg in self.legs.values():
            if leg.delivered_this > 0.0 and not leg.key.endswith("|c"):
                by_agg.setdefault(leg.agg_id, []).append(leg)
        for agg_id, legs in by_agg.items():
            if len(legs) < 2:
                continue
            agg = self.aggregates[agg_id]
            if not any(f.stripe_paths for f in agg.flows.values()):
                continue
            delays = [self.path_delay(leg.path, leg.prio) for leg in legs]
            dmin = min(delays)
            for leg, d in zip(legs, delays):
                if d > dmin + 1e-9:
                    agg.ooo_segments += int(leg.delivered_this / MSS)

    def _serve_link(self, lid, queue, cap_bytes, weights, arrivals) -> float:
        """Weighted sharing across priority buckets; max-min inside each."""
        remaining = cap_bytes
        served_total = 0.0
        active = [p for p in (2, 1, 0) if queue[p]]
        while active and remaining > BYTE_EPS:
            total_w = sum(weights[p] for p in active)
            next_active = []
            progressed = False
            for p in active:
                bucket = queue[p]
                share = remaining * weights[p] / total_w
                bucket_total = sum(bucket.values())
                if bucket_total <= share + BYTE_EPS:
                    amount = bucket_total
                else:
                    amount = share
                if amount > 0:
                    self._drain_bucket(lid, p, bucket, amount, arrivals)
                    served_total += amount
                    progressed = True
                if bucket:
                    next_active.append(p)
            remaining = cap_bytes - served_total
            active = next_active
            if not progressed:
                break
        return served_total

    def _drain_bucket(self, lid, prio, bucket, amount, arrivals) -> None:
        keys = sorted(bucket)
        demands = [bucket[k] for k in keys]
        shares = max_min_allocate(demands, amount)
        for key, share in zip(keys, shares):
            if share <= 0.0:
                continue
            bucket[key] -= share
            if bucket[key] <= BYTE_EPS:
                del bucket[key]
            self._forward(lid, key, share, arrivals)

    def _forward(self, lid, key, amount, arrivals) -> None:
        leg = self.legs[key]
        path = leg.path
        try:
            pos = path.index(lid)
        except ValueError:
            # stale bytes queued on a link no longer on the leg's path:
            # deliver directly (they were already deep in the fabric)
            self._credit_delivery(key, amount)
            return
        if pos == len(path) - 1:
            self._credit_delivery(key, amount)
        else:
            nxt = path[pos + 1]
            arrivals.setdefault(nxt, {})[key] = arrivals.get(nxt, {}).get(key, 0.0) + amount

    def _credit_delivery(self, key: str, amount: float) -> None:
        leg = self.legs[key]
        leg.delivered_this += amount
        leg.delivered_total += amount
        agg = self.aggregates[leg.agg_id]
        if key.endswith("|c") and agg.canary is not None:
            agg.interval_delivered_canary += amount
        else:
            # residual canary-leg bytes after the probe ended count as main
            agg.interval_delivered_main += amount
        agg.delivered_bytes += amount
        self._distribute_to_flows(agg, key, amount, drop=False)

    def _credit_drop(self, key: str, amount: float) -> None:
        leg = self.legs[key]
        leg.dropped_this += amount
        agg = self.aggregates[leg.agg_id]
        agg.dropped_bytes += amount
        agg.interval_dropped += amount
        self._distribute_to_flows(agg, key, amount, drop=True)

    def _distribute_to_flows(self, agg, leg_key, amount, drop: bool) -> None:
        tag = leg_key.split("|", 1)[1]
        flows = []
        for flow in agg.flows.values():
            if flow.in_flight <= BYTE_EPS:
                continue
            if tag == "c":
                if not (flow.canary and agg.canary is not None):
                    continue
            elif tag.startswith("p"):
                idx = int(tag[1:])
                on_leg = flow.path_idx == idx or (
                    flow.stripe_paths is not None and idx in flow.stripe_paths
                )
                if not on_leg:
                    continue
            else:
                if agg.canary is not None and flow.canary:
                    continue
                if flow.path_idx is not None or flow.stripe_paths is not None:
                    continue
            flows.append(flow)
        if not flows:
            # no matching live flows (e.g. leg retagged): spread over any
            # flow with in-flight bytes to keep conservation exact
            flows = [f for f in agg.flows.values() if f.in_flight > BYTE_EPS]
            if not flows:
                return
        flows.sort(key=lambda f: f.spec.id)
        shares = max_min_allocate([f.in_flight for f in flows], amount)
        for flow, share in zip(flows, shares):
            if drop:
                flow.dropped += share
            else:
                flow.delivered += share

    def _complete_flows(self, t_start: float, dt: float) -> None:
        for agg in self.aggregates.values():
            finished = []
            for flow in agg.flows.values():
                if flow.delivered >= flow.spec.size - 0.5:
                    finished.append(flow)
            if not finished:
                continue
            delay = self.path_delay(agg.current_path, agg.queue_level)
            for flow in finished:
                flow.done = True
                fct = (t_start + dt - flow.spec.start_time) + delay
                self.fct_samples.append((flow.spec.size, flow.spec.cls, fct, flow.spec.start_time))
                self.flows_completed += 1
                if self.trace is not None:
                    self.trace.record(
                        "flow_end",
                        t_start + dt,
                        flow=flow.spec.id,
                        agg=agg.id,
                        fct=round(fct, 9),
                        sent=round(flow.sent, 3),
                        delivered=round(flow.delivered, 3),
                        dropped=round(flow.dropped, 3),
                    )
                del agg.flows[flow.spec.id]

    # -- telemetry ------------------------------------------------------------------

    def path_delay(self, path: tuple[str, ...], prio: int) -> float:
        """One-way delay: propagation plus queue-ahead service time per hop."""
        total = 0.0
        for lid in path:
            link = self.topology.links[lid]
            queue = self.queues[lid]
            ahead = 0.0
            for p in QUEUE_LEVELS:
                if p >= prio:
                    ahead += sum(queue[p].values())
            total += link.propagation_delay + ahead * 8.0 / link.capacity
        return total

    def bottleneck_link(self, path: tuple[str, ...]) -> str:
        return max(path, key=lambda lid: (self.link_util[lid], lid))

    def collect_telemetry(self, agg_id: str, leg: str = "main") -> StateVector | None:
        """Build the feature observation for one aggregate (or its canary leg).

        Returns None when the telemetry poll is lost (fault injection).
        """
        agg = self.aggregates.get(agg_id)
        if agg is None:
            raise KeyError(f"unknown aggregate {agg_id!r}")
        if self.config.telemetry_loss_prob > 0.0:
            if self._telemetry_rng.random() < self.config.telemetry_loss_prob:
                return None
        dt = self.config.interval
        canary_view = leg == "canary" and agg.canary is not None
        if canary_view:
            path = agg.candidate_paths[agg.canary.path_idx]
            prio = agg.canary.queue_level
            delivered = agg.interval_delivered_canary
            prev = agg.prev_canary if agg.prev_canary is not None else agg.prev_main
            canary_leg = self.legs.get(f"{agg.id}|c")
            dropped = canary_leg.dropped_this if canary_leg is not None else 0.0
        else:
            path = agg.current_path
            prio = agg.queue_level
            delivered = agg.interval_delivered_main
            prev = agg.prev_main
            dropped = agg.interval_dropped
        bottleneck = self.bottleneck_link(path)
        util = self.link_util[bottleneck]
        q = self.queue_totals[bottleneck]
        loss_den = delivered + dropped
        loss = dropped / loss_den if loss_den > 0 else 0.0
        ecn = float(self.link_ecn[bottleneck])
        thr = delivered * 8.0 / dt
        delay = self.path_delay(path, prio)
        if prev is None:
            d_util = d_thr = d_delay = 0.0
        else:
            d_util = relative_change(util, prev[0])
            d_thr = relative_change(thr, prev[1])
            d_delay = relative_change(delay, prev[2])
        sample = (util, thr, delay)
        if canary_view:
            agg.prev_canary = sample
        else:
            agg.prev_main = sample
        budget = SLA_BUDGETS[agg.cls]
        v = 1 if delay > budget else 0
        return StateVector(
            util=util,
            q=q,
            loss=loss,
            ecn=ecn,
            thr=thr,
            delay=delay,
            d_util=d_util,
            d_thr=d_thr,
            d_delay=d_delay,
            a_prev=agg.action_history[0],
            a_prev2=agg.action_history[1],
            v=v,
        )

    # -- snapshots / draining -----------------------------------------------------------

    def link_utilization_snapshot(self) -> dict[str, float]:
        return dict(self.link_util)

    def aggregate_throughputs(self) -> dict[str, float]:
        dt = self.config.interval
        return {
            agg_id: (agg.interval_delivered_main + agg.interval_delivered_canary) * 8.0 / dt
            for agg_id, agg in self.aggregates.items()
        }

    def total_queued_bytes(self) -> float:
        return sum(self.queue_totals.values())

    def finalize(self, max_steps: int = 10_000) -> None:
        """Drain all queues with emissions stopped so per-flow conservation
        (sent == delivered + dropped) holds exactly at trial end."""
        for agg in self.aggregates.values():
            for flow in agg.flows.values():
                flow.rate_cap = 0.0
        steps = 0
        while self.total_queued_bytes() > BYTE_EPS and steps < max_steps:
            self.advance()
            steps += 1
        if self.total_queued_bytes() > BYTE_EPS:
            raise RuntimeError("queues failed to drain during finalize")
