"""Edge agent: the per-interval control loop for one rack's aggregates.

Each aggregate gets its own policy cache (adaptive tree), prediction score
and drift detector. The agent alternates between two modes:

* backup exploration - candidate actions are probed on canary traffic, the
  higher-utility candidate of each adjacent-interval pair becomes the
  training label;
* model execution - the tree's prediction is clipped to the envelope,
  reroutes are shadow-checked, and harmful outcomes are rolled back.

All bounds come from the controller-issued policy envelope; a stale
envelope suppresses reroutes while meter/queue control continues inside the
last valid bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .actions import (
    NOOP,
    ActionVector,
    REROUTE_HOLD,
    REROUTE_RELEASE,
    REROUTE_TRIGGER,
    SINGLE_DIM_ACTIONS,
)
from .envelope import PolicyEnvelope, bootstrap_envelope
from .fabric import FabricSim, StateVector
from .learner import AdwinDetector, HoeffdingAdaptiveTree, PredictionScore

N_FEATURES = 11


@dataclass
class AgentConfig:
    alpha: float = 0.10  # meter step fraction
    interval: float = 0.050  # seconds
    rollback_margin: float = 0.1  # utility units
    reroute_cooldown: float = 0.5  # seconds between committed reroutes
    p_threshold: float = 0.8
    score_beta: float = 0.9
    score_initial: float = 0.5
    micro_explore_every: int = 20  # execution-mode canary cadence, intervals
    drift_delta: float = 0.002
    congestion_threshold: float = 0.8  # shadow-check limit
    disabled_dims: frozenset = frozenset()  # ablations: {"meter","queue","reroute"}
    tree_params: dict = field(default_factory=dict)


def compute_utility(
    s_t: StateVector,
    weights,
    a_t: ActionVector = NOOP,
    a_prev: ActionVector = NOOP,
) -> float:
    """Scalar reward for the interval: throughput gain minus latency, loss,
    SLA and action-churn penalties."""
    w_thr, w_lat, w_loss, w_sla, w_act = weights
    return (
        w_thr * s_t.d_thr
        - w_lat * s_t.d_delay
        - w_loss * s_t.loss
        - w_sla * s_t.v
        - w_act * a_t.dims_changed(a_prev)
    )


def enforce_envelope(
    action: ActionVector,
    env: PolicyEnvelope,
    current_meter: float,
    *,
    alpha: float = 0.10,
    queue_level: int = 1,
    reroute_allowed: bool | None = None,
    rerouted: bool = False,
) -> ActionVector:
    """Clip an action so its execution cannot leave the envelope.

    Purely syntactic: the result's meter rate lands in [r_min, r_max], a
    reroute survives only when permitted, queue shifts are clamped to valid
    levels. Never fails.
    """
    meter = action.meter
    if not math.isinf(current_meter):
        if current_meter < env.r_min:
            meter = 1  # corrective pull into bounds
        elif current_meter > env.r_max:
            meter = -1
        elif meter != 0:
            stepped = current_meter * (1.0 + alpha * meter)
            clamped = min(max(stepped, env.r_min), env.r_max)
            if abs(clamped - current_meter) <= 1e-9 * max(current_meter, 1.0):
                meter = 0
    elif meter == 1 and math.isinf(env.r_max):
        meter = 0  # uncapped and unbounded: stepping up has no effect

    queue = action.queue
    if queue != 0 and not 0 <= queue_level + queue <= 2:
        queue = 0

    allowed = env.reroute_permitted if reroute_allowed is None else reroute_allowed
    reroute = action.reroute
    if reroute == REROUTE_TRIGGER and not allowed:
        reroute = REROUTE_HOLD
    elif reroute == REROUTE_RELEASE and (not allowed or not rerouted):
        reroute = REROUTE_HOLD
    return ActionVector(meter, queue, reroute)


def select_label(pairs: list[tuple[ActionVector, float]]) -> ActionVector:
    """Pick the higher-utility candidate; ties break toward the action
    closest to no-op, then toward the lower class id."""
    if len(pairs) < 2:
        raise ValueError("need at least two measured candidates")
    best_u = max(u for _, u in pairs)
    winners = [a for a, u in pairs if u >= best_u - 1e-12]
    winners.sort(key=lambda a: (a.distance_to_noop(), a.to_class()))
    return winners[0]


class _Cache:
    """Per-aggregate learning state (one policy cache per aggregate)."""

    def __init__(self, cfg: AgentConfig, noop_class: int):
        params = dict(grace_period=50, default_class=noop_class)
        params.update(cfg.tree_params)
        self.model = HoeffdingAdaptiveTree(n_features=N_FEATURES, **params)
        self.score = PredictionScore(
            beta=cfg.score_beta, threshold=cfg.p_threshold, initial=cfg.score_initial
        )
        self.drift = AdwinDetector(delta=cfg.drift_delta)
        self.envelope: PolicyEnvelope | None = None
        self.u_prev: float | None = None
        self.last_state: StateVector | None = None
        # pending canary measurements: list of [action, features, utility|None]
        self.probe_history: list = []
        self.active_probe: ActionVector | None = None
        self.candidates: list[ActionVector] = []
        self.first_interval: int | None = None
        self.converged_at: int | None = None
        self.drift_reset_at: int | None = None
        self.post_drift_convergence: list[int] = []
        self.intervals_seen: int = 0
        self.last_committed: dict | None = None  # pre-state of last reversible action
        self.mode: str = "explore"
        self.micro_phase: int = 0  # 0 idle, 1/2 = micro-episode progress
        self.label_count: int = 0
        self.drift_events: int = 0


class EdgeAgent:
    """Single-owner controller of all aggregates sourced at one rack."""

    def __init__(self, rack: int, sim: FabricSim, config: AgentConfig | None = None):
        self.rack = rack
        self.sim = sim
        self.config = config or AgentConfig()
        self.caches: dict[str, _Cache] = {}
        self.frozen = False  # controller override: no-op everything
        self.reroute_frozen_until = -math.inf  # arbitration freeze
        self.action_log: list[dict] = []
        self.noop_class = NOOP.to_class()

    # -- control-plane inputs --------------------------------------------------

    def cache_for(self, agg_id: str) -> _Cache:
        cache = self.caches.get(agg_id)
        if cache is None:
            cache = _Cache(self.config, self.noop_class)
            self.caches[agg_id] = cache
        return cache

    def receive_envelope(self, env: PolicyEnvelope) -> bool:
        """Adopt a pushed envelope; duplicates and stale versions are no-ops."""
        cache = self.cache_for(env.aggregate_id)
        if cache.envelope is not None and env.version <= cache.envelope.version:
            return False
        cache.envelope = env
        return True

    def freeze(self, value: bool = True) -> None:
        self.frozen = value

    def freeze_reroutes_until(self, expiry: float) -> None:
        self.reroute_frozen_until = max(self.reroute_frozen_until, expiry)

    def reset_model(self, agg_id: str) -> None:
        cache = self.caches.get(agg_id)
        if cache is None:
            return
        noop = self.noop_class
        params = dict(grace_period=50, default_class=noop)
        params.update(self.config.tree_params)
        cache.model = HoeffdingAdaptiveTree(n_features=N_FEATURES, **params)
        cache.score.reset()
        cache.drift = AdwinDetector(delta=self.config.drift_delta)
        cache.probe_history.clear()
        cache.active_probe = None
        cache.mode = "explore"

    def checkpoint(self, agg_id: str) -> dict:
        cache = self.cache_for(agg_id)
        return {
            "model": cache.model.to_blob().decode("latin1"),
            "score": cache.score.p,
            "envelope": cache.envelope.to_payload() if cache.envelope else None,
        }

    # -- the interval loop ------------------------------------------------------

    def interval_step(self, agg_id: str, s: StateVector | None, now: float) -> ActionVector:
        cache = self.cache_for(agg_id)
        cache.intervals_seen += 1
        if cache.first_interval is None:
            cache.first_interval = cache.intervals_seen
        agg = self.sim.aggregates[agg_id]
        env = cache.envelope
        if env is None:
            env = bootstrap_envelope(agg_id, r_max=self.sim.config.topology.host_rate)
            cache.envelope = env

        if s is None:
            self._log(now, agg_id, None, NOOP, env, cache, kind="telemetry_gap")
            if self.sim.trace is not None:
                self.sim.trace.record("telemetry_gap", now, agg=agg_id)
            return NOOP

        stale = env.stale(now)
        u_t = compute_utility(s, env.weights)
        cooldown_active = (now - agg.last_reroute_time) < self.config.reroute_cooldown
        reroute_allowed = (
            env.reroute_permitted
            and not stale
            and not cooldown_active
            and now >= self.reroute_frozen_until
            and "reroute" not in self.config.disabled_dims
        )

        if math.isinf(agg.meter_cap) and env.version > 0 and not math.isinf(env.r_max):
            # first real envelope: seat the meter mid-range so both step
            # directions have room to move
            self.sim.apply_restore(
                agg_id,
                meter_cap=env.r_min + 0.5 * (env.r_max - env.r_min),
                r_min=env.r_min,
                r_max=env.r_max,
                actor=f"agent{self.rack}",
                extra={"env_version": env.version, "mode": "meter_init", "rollback": False},
            )

        if self.frozen:
            self._settle_probe(agg_id, cache, env)
            action = NOOP
            self._log(now, agg_id, s, action, env, cache, kind="frozen")
        elif (
            cache.u_prev is not None
            and u_t < cache.u_prev - self.config.rollback_margin
            and cache.last_committed is not None
        ):
            self._settle_probe(agg_id, cache, env)
            self.rollback(agg_id, now)
            action = NOOP
        else:
            drifting = self._drift_signal(cache)
            if drifting or not cache.score.confident:
                cache.mode = "explore"
                action = self._explore_step(agg_id, agg, cache, s, env, reroute_allowed, now)
            else:
                if cache.mode == "explore" and cache.converged_at is None:
                    cache.converged_at = cache.intervals_seen
                if cache.mode == "explore" and cache.drift_reset_at is not None:
                    cache.post_drift_convergence.append(
                        cache.intervals_seen - cache.drift_reset_at
                    )
                    cache.drift_reset_at = None
                cache.mode = "execute"
                action = self._execute_step(agg_id, agg, cache, s, env, reroute_allowed, now)

        cache.u_prev = u_t
        cache.last_state = s
        return action

    # -- exploration ------------------------------------------------------------

    def _valid_candidates(self, agg, cache, s, env, reroute_allowed) -> list[ActionVector]:
        out = []
        cap = agg.meter_cap
        rerouted = agg.current_path_idx != agg.home_path_idx
        for cand in SINGLE_DIM_ACTIONS:
            if cand.meter != 0 and "meter" in self.config.disabled_dims:
                continue
            if cand.queue != 0 and "queue" in self.config.disabled_dims:
                continue
            if cand.reroute != REROUTE_HOLD and "reroute" in self.config.disabled_dims:
                continue
            if cand.meter != 0:
                if math.isinf(cap):
                    continue
                stepped = cap * (1.0 + self.config.alpha * cand.meter)
                # canary blast radius: the combined cap must stay in bounds
                frac = self.sim.config.canary_fraction
                combined = cap * (1.0 + frac * self.config.alpha * cand.meter)
                if not env.r_min <= combined <= env.r_max:
                    continue
                if abs(min(max(stepped, env.r_min), env.r_max) - cap) < 1e-9 * max(cap, 1.0):
                    continue
            if cand.queue != 0 and not 0 <= agg.queue_level + cand.queue <= 2:
                continue
            if cand.reroute == REROUTE_TRIGGER:
                if not env.reroute_permitted or env.stale(self.sim.now):
                    continue
                if len(agg.candidate_paths) < 2:
                    continue
            if cand.reroute == REROUTE_RELEASE and not rerouted:
                continue
            out.append(cand)
        return out

    def _pick_candidates(self, agg, cache, s, env, reroute_allowed) -> list[ActionVector]:
        valid = self._valid_candidates(agg, cache, s, env, reroute_allowed)
        if not valid:
            return [NOOP, NOOP]
        observations = cache.model.class_observations(s.features())
        ranked = sorted(
            enumerate(valid),
            key=lambda iv: (observations.get(iv[1].to_class(), 0), iv[0]),
        )
        picked = [ranked[0][1]]
        picked.append(ranked[1][1] if len(ranked) > 1 else NOOP)
        return picked

    def _explore_step(self, agg_id, agg, cache, s, env, reroute_allowed, now) -> ActionVector:
        self._settle_probe(agg_id, cache, env)
        # alternate candidates so every adjacent pair compares two actions
        if (
            not cache.candidates
            or cache.active_probe is None
            or cache.label_count % 4 == 0
        ):
            cache.candidates = self._pick_candidates(agg, cache, s, env, reroute_allowed)
        nxt = cache.candidates[0]
        if cache.active_probe is not None and nxt == cache.active_probe and len(cache.candidates) > 1:
            nxt = cache.candidates[1]
        self._apply_canary_probe(agg_id, agg, cache, nxt, s, env, now)
        # the main leg holds position while exploring
        self._log(now, agg_id, s, NOOP, env, cache, kind="explore")
        return NOOP

    def _apply_canary_probe(self, agg_id, agg, cache, action, s, env, now) -> None:
        target_idx = None
        if action.reroute == REROUTE_TRIGGER:
            target_idx = self._best_alternate(agg)
            if target_idx is None:
                action = NOOP
        self.sim.apply_switch_action(
            agg_id,
            action,
            r_min=env.r_min,
            r_max=env.r_max,
            canary=True,
            target_path_idx=target_idx,
            actor=f"agent{self.rack}",
            extra={"env_version": env.version, "mode": cache.mode},
        )
        # the probe's delta baseline is the aggregate's state right now
        agg.prev_canary = (s.util, s.thr, s.delay)
        cache.active_probe = action
        cache.probe_history.append([action, s.features(), None, env.version])
        if len(cache.probe_history) > 6:
            cache.probe_history.pop(0)

    def _settle_probe(self, agg_id, cache, env) -> None:
        """Measure the utility of the probe applied last interval from the
        canary leg's telemetry, then emit a label whenever two adjacent
        measurements compare different candidates."""
        if cache.active_probe is None:
            return
        agg = self.sim.aggregates.get(agg_id)
        if agg is None or agg.canary is None:
            return
        canary_sv = self.sim.collect_telemetry(agg_id, leg="canary")
        if canary_sv is None:  # lost poll: the measurement is simply missing
            return
        u = compute_utility(canary_sv, env.weights, a_t=cache.active_probe, a_prev=NOOP)
        for entry in reversed(cache.probe_history):
            if entry[0] == cache.active_probe and entry[2] is None:
                entry[2] = u
                break
        self._maybe_label(cache, env)

    def _maybe_label(self, cache, env) -> None:
        measured = [e for e in cache.probe_history if e[2] is not None]
        if len(measured) < 2:
            return
        a_entry, b_entry = measured[-2], measured[-1]
        if a_entry[0] == b_entry[0]:
            return
        if a_entry[3] != env.version or b_entry[3] != env.version:
            # envelope changed under the probe window: discard, do not train
            cache.probe_history = [e for e in cache.probe_history if e[2] is None]
            return
        label_action = select_label([(a_entry[0], a_entry[2]), (b_entry[0], b_entry[2])])
        label = label_action.to_class()
        features = a_entry[1]
        pred = cache.model.predict(features)
        correct = pred == label
        cache.model.update(features, label)
        cache.score.update(correct)
        cache.label_count += 1
        if cache.drift.add(0.0 if correct else 1.0) and cache.drift.last_change_increased:
            cache.drift_events += 1
            cache.score.reset()
            cache.drift_reset_at = cache.intervals_seen
        cache.probe_history = cache.probe_history[-1:]

    def _drift_signal(self, cache) -> bool:
        return cache.drift_reset_at is not None and not cache.score.confident

    # -- execution --------------------------------------------------------------

    def _best_alternate(self, agg) -> int | None:
        best_idx, best_util = None, math.inf
        for idx, path in enumerate(agg.candidate_paths):
            if idx == agg.current_path_idx:
                continue
            util = max(self.sim.link_util[lid] for lid in path)
            if util < best_util - 1e-12 or (util < best_util + 1e-12 and best_idx is None):
                best_idx, best_util = idx, util
        return best_idx

    def shadow_check(self, agg, target_path) -> bool:
        """Deny a reroute whose target would itself tip past the congestion
        threshold once this aggregate's throughput lands on it."""
        thr = (agg.interval_delivered_main + agg.interval_delivered_canary) * 8.0 / self.sim.config.interval
        for lid in target_path:
            link = self.sim.topology.links[lid]
            if self.sim.link_util[lid] + thr / link.capacity > self.config.congestion_threshold:
                return False
        return True

    def _execute_step(self, agg_id, agg, cache, s, env, reroute_allowed, now) -> ActionVector:
        self._settle_probe(agg_id, cache, env)
        if cache.micro_phase == 0 and cache.intervals_seen % self.config.micro_explore_every == 0:
            cache.micro_phase = 1
        elif cache.micro_phase in (1, 2):
            cache.micro_phase += 1
        if cache.micro_phase in (1, 2):
            # background micro-exploration: the canary probes while the main
            # leg holds, so the per-interval action budget is respected
            return self._explore_micro(agg_id, agg, cache, s, env, reroute_allowed, now)
        if cache.micro_phase > 2:
            cache.micro_phase = 0
        if agg.canary is not None:
            self.sim.end_canary(agg_id)
            cache.active_probe = None

        predicted = ActionVector.from_class(cache.model.predict(s.features()))
        predicted = self._mask_disabled(predicted)
        action = enforce_envelope(
            predicted,
            env,
            agg.meter_cap,
            alpha=self.config.alpha,
            queue_level=agg.queue_level,
            reroute_allowed=reroute_allowed,
            rerouted=agg.current_path_idx != agg.home_path_idx,
        )
        denial = None
        target_idx = None
        if action.reroute == REROUTE_TRIGGER:
            target_idx = self._best_alternate(agg)
            if target_idx is None or not self.shadow_check(agg, agg.candidate_paths[target_idx]):
                denial = "shadow_check"
                action = ActionVector(action.meter, action.queue, REROUTE_HOLD)
                target_idx = None
        pre = {
            "meter_cap": agg.meter_cap,
            "queue_level": agg.queue_level,
            "path_idx": agg.current_path_idx,
        }
        record = self.sim.apply_switch_action(
            agg_id,
            action,
            r_min=env.r_min,
            r_max=env.r_max,
            target_path_idx=target_idx,
            actor=f"agent{self.rack}",
            extra={"env_version": env.version, "mode": "execute"},
        )
        if not action.is_noop:
            cache.last_committed = {
                "action": action,
                "pre": pre,
                "env_version": env.version,
                "time": now,
            }
        self._log(
            now, agg_id, s, action, env, cache, kind="execute", denial=denial, record=record
        )
        return action

    def _explore_micro(self, agg_id, agg, cache, s, env, reroute_allowed, now) -> ActionVector:
        if cache.active_probe is None:
            cache.candidates = self._pick_candidates(agg, cache, s, env, reroute_allowed)
        nxt = cache.candidates[0]
        if cache.active_probe is not None and nxt == cache.active_probe and len(cache.candidates) > 1:
            nxt = cache.candidates[1]
        self._apply_canary_probe(agg_id, agg, cache, nxt, s, env, now)
        self._log(now, agg_id, s, NOOP, env, cache, kind="micro_explore")
        return NOOP

    def _mask_disabled(self, action: ActionVector) -> ActionVector:
        meter = 0 if "meter" in self.config.disabled_dims else action.meter
        queue = 0 if "queue" in self.config.disabled_dims else action.queue
        reroute = (
            REROUTE_HOLD if "reroute" in self.config.disabled_dims else action.reroute
        )
        return ActionVector(meter, queue, reroute)

    # -- rollback -----------------------------------------------------------------

    def rollback(self, agg_id: str, now: float) -> None:
        """Reverse the last committed action exactly; no-op on empty log."""
        cache = self.caches.get(agg_id)
        if cache is None or cache.last_committed is None:
            return
        committed = cache.last_committed
        cache.last_committed = None
        agg = self.sim.aggregates[agg_id]
        env = cache.envelope
        action: ActionVector = committed["action"]
        pre = committed["pre"]
        kwargs = {}
        if action.meter != 0:
            kwargs["meter_cap"] = pre["meter_cap"]
        if action.queue != 0:
            kwargs["queue_level"] = pre["queue_level"]
        if action.reroute != REROUTE_HOLD:
            if env.reroute_permitted and not env.stale(now):
                kwargs["path_idx"] = pre["path_idx"]
        if not kwargs:
            return
        record = self.sim.apply_restore(
            agg_id,
            r_min=env.r_min,
            r_max=env.r_max,
            actor=f"agent{self.rack}",
            extra={"env_version": env.version, "mode": "rollback", "rolled_back": action.to_class()},
            **kwargs,
        )
        self._log(now, agg_id, None, NOOP, env, cache, kind="rollback", record=record)

    # -- logging -------------------------------------------------------------------

    def _log(self, now, agg_id, s, action, env, cache, kind, denial=None, record=None) -> None:
        entry = {
            "t": round(now, 9),
            "agg": agg_id,
            "kind": kind,
            "action": action.to_class(),
            "env_version": env.version,
            "u_prev": cache.u_prev,
            "p": round(cache.score.p, 6),
        }
        if denial:
            entry["denied"] = denial
        if record is not None:
            entry["post_cap"] = record.get("post_cap")
            entry["post_queue"] = record.get("post_queue")
            entry["post_path"] = record.get("post_path")
        self.action_log.append(entry)
