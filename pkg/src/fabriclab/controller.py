"""Slow-timescale controller: compiles telemetry and tenant policy into
per-aggregate envelopes, adapts utility weights, raises bottleneck alerts,
and arbitrates conflicting reroutes at shared links.

The controller is a single logical actor. It never touches switch state
directly; everything it decides leaves as a message through the ``send``
callable it was constructed with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .envelope import PolicyEnvelope

DEFAULT_WEIGHT_TEMPLATES = {
    "bulk": (0.40, 0.10, 0.20, 0.10, 0.20),
    "latency_sensitive": (0.15, 0.30, 0.10, 0.35, 0.10),
}


@dataclass
class ControllerConfig:
    refresh_interval: float = 0.5  # seconds
    theta: float = 0.8  # congestion threshold
    headroom: float = 0.1  # reserved link fraction
    burst_allowance: float = 0.2  # rho
    demand_halflife: float = 2.0  # seconds, EWMA of measured throughput
    gamma: float = 0.2  # weight adjustment step
    weight_floor: float = 0.05
    weight_ceiling: float = 0.6
    alert_dwell: int = 2  # refresh cycles over theta before alerting
    alert_hysteresis: float = 0.05
    arbitration_lifetime: float = 2.0  # seconds
    arbitration_enabled: bool = True
    reroute_cooldown: float = 0.5
    sustained_violation_frac: float = 0.5
    spare_util: float = 0.6
    staleness_bound: float = 0.5
    recent_reroute_window: float = 2.0


@dataclass
class TenantPolicy:
    """Operator policy file contents."""

    floors: dict[int, float] = field(default_factory=dict)  # bits/s per aggregate
    ceilings: dict[int, float] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)  # water-filling share
    default_floor: float = 0.0
    default_ceiling: float = math.inf
    default_weight: float = 1.0

    def floor(self, tenant: int) -> float:
        return self.floors.get(tenant, self.default_floor)

    def ceiling(self, tenant: int) -> float:
        return self.ceilings.get(tenant, self.default_ceiling)

    def phi(self, tenant: int) -> float:
        return self.weights.get(tenant, self.default_weight)


@dataclass
class BottleneckAlert:
    link: str
    utilization: float
    aggregates: tuple[str, ...]
    issued_at: float


@dataclass
class ArbitrationDecision:
    link: str
    primary: str  # aggregate id given the reroute permission
    frozen: tuple[str, ...]
    expiry: float


def compute_envelope_bounds(
    aggregates: dict[str, dict],
    links: dict[str, dict],
    policy: TenantPolicy,
    rho: float,
    eps_q: float,
    theta: float,
) -> dict[str, tuple[float, float]]:
    """Closed-form bounds: tenant floors, burst-adjusted demand capped by
    tenant ceilings, then weighted water filling of the residual budget on
    every congested link; multi-link paths keep the tightest bound.

    ``aggregates[agg_id]`` needs: tenant, demand, path (link ids).
    ``links[link_id]`` needs: capacity, util.
    """
    bounds: dict[str, list[float]] = {}
    warnings: list[str] = []
    for agg_id, info in aggregates.items():
        tenant = info["tenant"]
        if tenant not in policy.floors and policy.default_floor == 0.0:
            warnings.append(agg_id)
        r_min = policy.floor(tenant)
        r_max = min(info["demand"] * (1.0 + rho), policy.ceiling(tenant))
        bounds[agg_id] = [r_min, r_max]
    members: dict[str, list[str]] = {}
    for agg_id, info in aggregates.items():
        for lid in info["path"]:
            members.setdefault(lid, []).append(agg_id)
    for lid, agg_ids in members.items():
        link = links.get(lid)
        if link is None or link["util"] <= theta:
            continue
        capacity = link["capacity"]
        floor_sum = sum(bounds[a][0] for a in agg_ids)
        budget = max(0.0, (1.0 - eps_q) * capacity - floor_sum)
        phi_sum = sum(policy.phi(aggregates[a]["tenant"]) for a in agg_ids)
        for agg_id in agg_ids:
            phi = policy.phi(aggregates[agg_id]["tenant"])
            share = bounds[agg_id][0] + phi * budget / phi_sum
            bounds[agg_id][1] = min(bounds[agg_id][1], share)
    out = {}
    for agg_id, (r_min, r_max) in bounds.items():
        out[agg_id] = (r_min, max(r_min, r_max))
    return out


def project_weights(raw, lo: float, hi: float) -> tuple[float, ...]:
    """Scale weights multiplicatively onto the unit simplex intersected with
    the [lo, hi] box: find the scale whose clipped sum is one (bisection)."""
    n = len(raw)
    if not lo * n <= 1.0 <= hi * n:
        raise ValueError("operator range cannot contain a unit-sum weight vector")

    def clipped_sum(scale: float) -> float:
        return sum(min(max(scale * w, lo), hi) for w in raw)

    low, high = 1e-12, 1e12
    for _ in range(200):
        mid = math.sqrt(low * high)
        if clipped_sum(mid) < 1.0:
            low = mid
        else:
            high = mid
    scale = math.sqrt(low * high)
    clipped = [min(max(scale * w, lo), hi) for w in raw]
    total = sum(clipped)
    # residual redistribution over unclamped entries removes bisection slack
    free = [i for i in range(n) if lo < clipped[i] < hi]
    if free and abs(total - 1.0) > 1e-12:
        adjust = (1.0 - total) / len(free)
        for i in free:
            clipped[i] = min(max(clipped[i] + adjust, lo), hi)
    return tuple(clipped)


def update_weights(
    current,
    sustained_violations: bool,
    spare_capacity: bool,
    gamma: float,
    lo: float,
    hi: float,
) -> tuple[float, ...]:
    """Directional nudges, then projection onto the operator box/simplex:
    sustained SLA violations raise the latency and SLA weights; satisfied
    SLAs with spare capacity raise the throughput weight."""
    raw = list(current)
    if sustained_violations:
        raw[1] *= 1.0 + gamma
        raw[3] *= 1.0 + gamma
    elif spare_capacity:
        raw[0] *= 1.0 + gamma
    return project_weights(raw, lo, hi)


class Controller:
    def __init__(
        self,
        topology,
        policy: TenantPolicy,
        send,
        config: ControllerConfig | None = None,
        trace=None,
    ):
        self.topology = topology
        self.policy = policy
        self.send = send  # callable(kind: str, payload: dict)
        self.config = config or ControllerConfig()
        self.trace = trace
        self.versions: dict[str, int] = {}
        self.demand_ewma: dict[str, float] = {}
        self.weights: dict[str, tuple[float, ...]] = {}
        self.latest_telemetry: dict | None = None
        self.sla_window: dict[str, list[int]] = {}
        self.util_window: dict[str, list[float]] = {}
        self.over_theta_streak: dict[str, int] = {}
        self.active_alerts: dict[str, BottleneckAlert] = {}
        self.arbitration: dict[str, ArbitrationDecision] = {}
        self.recent_reroutes: dict[str, list[tuple[float, str, str]]] = {}
        self.last_reroute_time: dict[str, float] = {}
        self.issued: list[PolicyEnvelope] = []

    # -- inbound messages ----------------------------------------------------

    def on_message(self, kind: str, payload: dict) -> None:
        if kind == "telemetry_report":
            self.latest_telemetry = payload
            for agg_id, v in payload.get("sla_flags", {}).items():
                self.sla_window.setdefault(agg_id, []).append(int(v))
            for agg_id, util in payload.get("agg_utils", {}).items():
                self.util_window.setdefault(agg_id, []).append(float(util))
        elif kind == "action_log_batch":
            for entry in payload.get("entries", []):
                if entry.get("reroute") in ("trigger", "release") and not entry.get("canary"):
                    agg_id = entry["agg"]
                    self.last_reroute_time[agg_id] = entry["t"]
                    self.recent_reroutes.setdefault(agg_id, []).append(
                        (entry["t"], entry.get("old_path", ""), entry.get("new_path", ""))
                    )

    # -- envelope refresh ------------------------------------------------------

    def refresh(self, now: float) -> list[PolicyEnvelope]:
        """One refresh cycle: demand smoothing, bottleneck detection,
        arbitration, bounds, weights, versioned pushes."""
        telemetry = self.latest_telemetry
        if telemetry is None:
            return []
        link_utils: dict[str, float] = telemetry.get("link_utils", {})
        agg_info: dict[str, dict] = telemetry.get("aggregates", {})
        self._update_demands(agg_info)
        alerts = self.detect_bottlenecks(link_utils, agg_info, now)
        if self.config.arbitration_enabled:
            for alert in alerts:
                self.arbitrate(alert, now)
        self._expire_arbitration(now)

        links = {
            lid: {"capacity": self.topology.links[lid].capacity, "util": link_utils.get(lid, 0.0)}
            for lid in self.topology.links
        }
        agg_inputs = {
            agg_id: {
                "tenant": info["tenant"],
                "demand": self.demand_ewma.get(agg_id, info.get("thr", 0.0)),
                "path": tuple(info["path"]),
            }
            for agg_id, info in agg_info.items()
        }
        bounds = compute_envelope_bounds(
            agg_inputs,
            links,
            self.policy,
            rho=self.config.burst_allowance,
            eps_q=self.config.headroom,
            theta=self.config.theta,
        )

        frozen_aggs = set()
        for decision in self.arbitration.values():
            frozen_aggs.update(decision.frozen)

        envelopes = []
        for agg_id, (r_min, r_max) in sorted(bounds.items()):
            info = agg_info[agg_id]
            reroute_ok = self._reroute_permission(
                agg_id, info, link_utils, r_min, now, frozen_aggs
            )
            weights = self._refresh_weights(agg_id, info, link_utils)
            version = self.versions.get(agg_id, 0) + 1
            self.versions[agg_id] = version
            env = PolicyEnvelope(
                aggregate_id=agg_id,
                version=version,
                r_min=r_min,
                r_max=r_max,
                reroute_permitted=reroute_ok,
                weights=weights,
                issued_at=now,
                staleness_bound=self.config.staleness_bound,
            )
            envelopes.append(env)
            self.issued.append(env)
            self.send("envelope_push", env.to_payload())
            if self.trace is not None:
                self.trace.record(
                    "envelope",
                    now,
                    agg=agg_id,
                    version=version,
                    r_min=round(r_min, 3),
                    r_max=round(r_max, 3),
                    reroute=reroute_ok,
                    weights=[round(w, 6) for w in weights],
                )
        # windows are per refresh cycle
        self.sla_window.clear()
        self.util_window.clear()
        return envelopes

    def _update_demands(self, agg_info: dict) -> None:
        cfg = self.config
        alpha = 1.0 - 0.5 ** (cfg.refresh_interval / cfg.demand_halflife)
        for agg_id, info in agg_info.items():
            thr = info.get("thr", 0.0)
            prev = self.demand_ewma.get(agg_id)
            self.demand_ewma[agg_id] = thr if prev is None else prev + alpha * (thr - prev)

    def _reroute_permission(self, agg_id, info, link_utils, r_min, now, frozen_aggs) -> bool:
        if agg_id in frozen_aggs:
            return False
        last = self.last_reroute_time.get(agg_id, -math.inf)
        if now - last < self.config.reroute_cooldown:
            return False
        residual = 0.0
        current = tuple(info["path"])
        for path in info.get("alternates", []):
            path = tuple(path)
            if path == current:
                continue
            spare = min(
                self.topology.links[lid].capacity * (1.0 - link_utils.get(lid, 0.0))
                for lid in path
            )
            residual = max(residual, spare)
        return residual > r_min

    def _refresh_weights(self, agg_id, info, link_utils) -> tuple[float, ...]:
        cfg = self.config
        template = DEFAULT_WEIGHT_TEMPLATES.get(
            info.get("cls", "bulk"), DEFAULT_WEIGHT_TEMPLATES["bulk"]
        )
        current = self.weights.get(agg_id, template)
        flags = self.sla_window.get(agg_id, [])
        sustained = bool(flags) and sum(flags) / len(flags) >= cfg.sustained_violation_frac
        utils = self.util_window.get(agg_id, [])
        spare = (
            bool(utils)
            and not any(flags)
            and sum(utils) / len(utils) <= cfg.spare_util
        )
        updated = update_weights(
            current, sustained, spare, cfg.gamma, cfg.weight_floor, cfg.weight_ceiling
        )
        self.weights[agg_id] = updated
        return updated

    # -- bottleneck detection ---------------------------------------------------

    def detect_bottlenecks(self, link_utils, agg_info, now: float) -> list[BottleneckAlert]:
        cfg = self.config
        new_alerts = []
        for lid in self.topology.links:
            util = link_utils.get(lid, 0.0)
            streak = self.over_theta_streak.get(lid, 0)
            if util > cfg.theta:
                streak += 1
            elif util < cfg.theta - cfg.alert_hysteresis:
                streak = 0
                if lid in self.active_alerts:
                    del self.active_alerts[lid]
                    if self.trace is not None:
                        self.trace.record("alert", now, link=lid, state="cleared")
            self.over_theta_streak[lid] = streak
            if streak >= cfg.alert_dwell and lid not in self.active_alerts:
                involved = tuple(
                    sorted(a for a, info in agg_info.items() if lid in info["path"])
                )
                alert = BottleneckAlert(lid, util, involved, now)
                self.active_alerts[lid] = alert
                new_alerts.append(alert)
                self.send(
                    "bottleneck_alert",
                    {"link": lid, "util": util, "aggregates": list(involved)},
                )
                if self.trace is not None:
                    self.trace.record(
                        "alert", now, link=lid, state="raised", util=round(util, 4)
                    )
        return new_alerts

    # -- arbitration -----------------------------------------------------------------

    def arbitrate(self, alert: BottleneckAlert, now: float) -> ArbitrationDecision | None:
        """Serialize conflicting reroutes: the heaviest aggregate keeps its
        permission, everyone else on the link is frozen for the lifetime."""
        window = self.config.recent_reroute_window
        movers = [
            agg_id
            for agg_id in alert.aggregates
            if any(now - t <= window for t, _, _ in self.recent_reroutes.get(agg_id, []))
        ]
        if len(movers) < 2:
            return None
        telemetry = self.latest_telemetry or {}
        thr = {a: telemetry.get("aggregates", {}).get(a, {}).get("thr", 0.0) for a in movers}
        # largest throughput wins; ties break to the lowest id
        primary = min(movers, key=lambda a: (-thr[a], a))
        frozen = tuple(a for a in movers if a != primary)
        decision = ArbitrationDecision(alert.link, primary, frozen, now + self.config.arbitration_lifetime)
        self.arbitration[alert.link] = decision
        if self.trace is not None:
            self.trace.record(
                "arbitration",
                now,
                link=alert.link,
                primary=primary,
                frozen=list(frozen),
                expiry=round(decision.expiry, 6),
            )
        return decision

    def _expire_arbitration(self, now: float) -> None:
        for lid in list(self.arbitration):
            if self.arbitration[lid].expiry <= now:
                del self.arbitration[lid]

    # -- operator overrides -------------------------------------------------------------

    def override(self, agent_rack: int, directive: str, envelope: PolicyEnvelope | None = None, now: float = 0.0) -> None:
        if directive not in ("freeze", "unfreeze", "reset_model", "force_envelope"):
            raise ValueError(f"unknown override directive {directive!r}")
        payload: dict = {"agent": agent_rack, "directive": directive}
        if directive == "force_envelope":
            if envelope is None:
                raise ValueError("force_envelope needs an envelope")
            version = self.versions.get(envelope.aggregate_id, 0) + 1
            self.versions[envelope.aggregate_id] = version
            env = PolicyEnvelope(
                aggregate_id=envelope.aggregate_id,
                version=version,
                r_min=envelope.r_min,
                r_max=envelope.r_max,
                reroute_permitted=envelope.reroute_permitted,
                weights=envelope.weights,
                issued_at=now,
                staleness_bound=envelope.staleness_bound,
            )
            payload["envelope"] = env.to_payload()
        self.send("override", payload)
        if self.trace is not None:
            self.trace.record("override", now, agent=agent_rack, directive=directive)
