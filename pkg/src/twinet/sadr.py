"""Safe Adaptive Data Rate (SADR) controller.

Risky traffic requests (normalized aggregate demand above a threshold) are
evaluated in the twin before being committed to the real cell; if the twin's
mean reward misses the application requirement, a known-safe setup is applied
instead. The per-tick objective is sum over UEs of
psr_i - (r_exp_i - r_act_i) / r_exp_i, with the deficit term defined as 0
when r_exp_i = 0.

The controller is an event-driven state machine; its two handlers are never
run concurrently (callers serialize events). Twin evaluation happens on the
twin side; the controller only awaits the EvalResult envelope.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .link import TOPIC_DT_EVAL_RESULT, TOPIC_RW_REQUEST, LinkEndpoint
from .netsim import CellSim, NetworkState, ScenarioConfig

log = logging.getLogger(__name__)

LAUNCH_DIRECTLY = "launch_directly"
DEFER_TO_TWIN = "defer_to_twin"
SAFE_FALLBACK = "safe_fallback"  # twin unreachable while deferral was required

DEFAULT_HORIZON_TICKS = 50

SADR_CSV_SCHEMA = ["instance", "arm", "repetition", "mean_reward"]


@dataclass(frozen=True)
class ActionSet:
    """The 10 exclusive per-UE rate levels, from no traffic to 4.5 Mbps."""

    actions: tuple[float, ...] = tuple(0.5 * a for a in range(10))

    def __post_init__(self) -> None:
        if len(self.actions) != 10:
            raise ValueError("action set must hold exactly 10 levels")
        if self.actions[0] != 0.0 or self.actions[-1] != 4.5:
            raise ValueError("action set must span 0 to 4.5 Mbps")
        if any(b <= a for a, b in zip(self.actions, self.actions[1:])):
            raise ValueError("action levels must be strictly increasing")

    def rate_for(self, action: int) -> float:
        if not 0 <= action < len(self.actions):
            raise IndexError(f"action index out of range: {action}")
        return self.actions[action]


def map_action_to_rate(action: int, action_set: ActionSet | None = None) -> float:
    """Expected rate r_exp for an action index (linear 0.5 Mbps spacing)."""
    return (action_set or ActionSet()).rate_for(action)


def compute_risk(risk_vector, capacity_mbps: float) -> float:
    """Risk of a request: aggregate demanded rate normalized by cell capacity."""
    rates = np.asarray(risk_vector, dtype=float)
    if np.any(rates < 0):
        raise ValueError("risk vector rates must be non-negative")
    return float(np.sum(rates) / capacity_mbps)


def per_tick_reward(state: NetworkState) -> float:
    """Objective for one tick: sum of psr minus rate-compliance deficit."""
    total = 0.0
    for ue in state.ues:
        if ue.r_exp_mbps > 0:
            deficit = (ue.r_exp_mbps - ue.r_act_mbps) / ue.r_exp_mbps
        else:
            deficit = 0.0
        total += ue.psr - deficit
    return total


@dataclass(frozen=True)
class TrafficRequest:
    request_id: int
    action_indices: tuple[int, ...]
    risk_vector: tuple[float, ...]

    @classmethod
    def from_actions(cls, request_id: int, action_indices,
                     action_set: ActionSet | None = None) -> "TrafficRequest":
        action_set = action_set or ActionSet()
        indices = tuple(action_indices)
        return cls(
            request_id=request_id,
            action_indices=indices,
            risk_vector=tuple(action_set.rate_for(a) for a in indices),
        )


@dataclass(frozen=True)
class SadrConfig:
    risk_threshold: float
    app_requirements: float
    safe_setup: tuple[float, ...]
    twin_horizon_ticks: int = DEFAULT_HORIZON_TICKS

    def __post_init__(self) -> None:
        if self.risk_threshold <= 0:
            raise ValueError("risk_threshold must be positive")


@dataclass(frozen=True)
class TwinEvaluation:
    request_id: int
    twin_reward: float
    per_tick_rewards: tuple[float, ...]


def twin_evaluate(twin_sim: CellSim, req: TrafficRequest,
                  horizon: int = DEFAULT_HORIZON_TICKS) -> TwinEvaluation:
    """Apply the requested rates to the twin and run it for ``horizon`` ticks."""
    twin_sim.apply_allocation(req.risk_vector)
    rewards = tuple(per_tick_reward(twin_sim.step_tick()) for _ in range(horizon))
    return TwinEvaluation(
        request_id=req.request_id,
        twin_reward=float(np.mean(rewards)),
        per_tick_rewards=rewards,
    )


class SadrController:
    """Implements the two event handlers of the SADR decision routine."""

    def __init__(self, config: SadrConfig, real_sim: CellSim,
                 send_eval_request: Callable[[TrafficRequest], None] | None = None):
        self.config = config
        self.real_sim = real_sim
        self.send_eval_request = send_eval_request
        self.pending: dict[int, TrafficRequest] = {}
        self.applied_rates: tuple[float, ...] | None = None
        self.flagged = False
        self.unknown_results = 0

    def _launch(self, rates) -> tuple[float, ...]:
        rates = tuple(float(r) for r in rates)
        self.real_sim.apply_allocation(rates)
        self.applied_rates = rates
        return rates

    def on_traffic_request(self, req: TrafficRequest) -> str:
        """New UE traffic request: launch directly, or defer risky ones to the twin."""
        risk = compute_risk(req.risk_vector, self.real_sim.config.capacity_mbps)
        if risk > self.config.risk_threshold:  # strictly above triggers the twin
            if self.send_eval_request is None:
                self.flagged = True
                self._launch(self.config.safe_setup)
                return SAFE_FALLBACK
            try:
                self.send_eval_request(req)
            except Exception as exc:
                log.warning("twin unreachable (%s); applying safe setup", exc)
                self.flagged = True
                self._launch(self.config.safe_setup)
                return SAFE_FALLBACK
            self.pending[req.request_id] = req
            return DEFER_TO_TWIN
        self._launch(req.risk_vector)
        return LAUNCH_DIRECTLY

    def on_twin_evaluation_completed(
        self, evaluation: TwinEvaluation
    ) -> tuple[float, ...] | None:
        """Twin verdict for a pending request: grant it or fall back to safety."""
        req = self.pending.pop(evaluation.request_id, None)
        if req is None:
            self.unknown_results += 1
            return None
        if evaluation.twin_reward >= self.config.app_requirements:
            return self._launch(req.risk_vector)
        return self._launch(self.config.safe_setup)


# -- envelope payloads --------------------------------------------------------


def encode_eval_request(req: TrafficRequest, horizon: int) -> bytes:
    return json.dumps(
        {
            "request_id": req.request_id,
            "rates_mbps": list(req.risk_vector),
            "horizon_ticks": horizon,
        },
        separators=(",", ":"),
    ).encode("utf-8")


def decode_eval_request(payload: bytes) -> tuple[TrafficRequest, int]:
    obj = json.loads(payload)
    req = TrafficRequest(
        request_id=obj["request_id"],
        action_indices=(),
        risk_vector=tuple(obj["rates_mbps"]),
    )
    return req, obj["horizon_ticks"]


def encode_eval_result(evaluation: TwinEvaluation) -> bytes:
    return json.dumps(
        {
            "request_id": evaluation.request_id,
            "twin_reward": evaluation.twin_reward,
            "per_tick_rewards": list(evaluation.per_tick_rewards),
        },
        separators=(",", ":"),
    ).encode("utf-8")


def decode_eval_result(payload: bytes) -> TwinEvaluation:
    obj = json.loads(payload)
    return TwinEvaluation(
        request_id=obj["request_id"],
        twin_reward=obj["twin_reward"],
        per_tick_rewards=tuple(obj["per_tick_rewards"]),
    )


def twin_sim_for(scenario: ScenarioConfig, request_id: int) -> CellSim:
    """Fresh twin mirroring the real cell config, seeded per request."""
    seed = np.random.SeedSequence([scenario.seed, request_id])
    return CellSim(ScenarioConfig(
        n_ues=scenario.n_ues,
        capacity_mbps=scenario.capacity_mbps,
        tick_ms=scenario.tick_ms,
        psr_noise_sigma=scenario.psr_noise_sigma,
        seed=int(seed.generate_state(1)[0]),
    ))


class TwinEvalService:
    """Twin-side worker: answers EvalRequest envelopes with EvalResult."""

    def __init__(self, link: LinkEndpoint, scenario: ScenarioConfig):
        self.link = link
        self.scenario = scenario
        self.link.subscribe(TOPIC_RW_REQUEST)

    def serve_one(self, timeout: float | None = 1.0) -> bool:
        envelope = self.link.poll_envelope(timeout)
        if envelope is None or envelope.kind != "EvalRequest":
            return False
        req, horizon = decode_eval_request(envelope.payload)
        evaluation = twin_evaluate(twin_sim_for(self.scenario, req.request_id),
                                   req, horizon)
        self.link.publish_envelope(
            TOPIC_DT_EVAL_RESULT, "EvalResult", encode_eval_result(evaluation)
        )
        return True

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            self.serve_one(timeout=0.1)


# -- twin gates (controller-side transport to the evaluation service) ---------


class LocalTwinGate:
    """In-process twin evaluation, bypassing the broker (unit tests, oracles)."""

    def __init__(self, scenario: ScenarioConfig,
                 horizon: int = DEFAULT_HORIZON_TICKS):
        self.scenario = scenario
        self.horizon = horizon
        self._pending: TrafficRequest | None = None

    def send(self, req: TrafficRequest) -> None:
        self._pending = req

    def result(self, request_id: int, timeout: float = 0.0) -> TwinEvaluation:
        assert self._pending is not None and self._pending.request_id == request_id
        req, self._pending = self._pending, None
        return twin_evaluate(twin_sim_for(self.scenario, req.request_id), req,
                             self.horizon)


class LinkTwinGate:
    """Controller-side gate that round-trips evaluations over the broker."""

    def __init__(self, link: LinkEndpoint, horizon: int = DEFAULT_HORIZON_TICKS):
        self.link = link
        self.horizon = horizon
        self.link.subscribe(TOPIC_DT_EVAL_RESULT)

    def send(self, req: TrafficRequest) -> None:
        self.link.publish_envelope(
            TOPIC_RW_REQUEST, "EvalRequest", encode_eval_request(req, self.horizon)
        )

    def result(self, request_id: int, timeout: float = 30.0) -> TwinEvaluation:
        envelope = self.link.poll_envelope(timeout)
        while envelope is not None:
            if envelope.kind == "EvalResult":
                evaluation = decode_eval_result(envelope.payload)
                if evaluation.request_id == request_id:
                    return evaluation
            envelope = self.link.poll_envelope(timeout)
        raise TimeoutError(f"no twin evaluation for request {request_id}")


# -- escalating-demand scenario ------------------------------------------------


def default_instances(n_ues: int) -> list[tuple[int, ...]]:
    """Escalating per-UE action indices: all UEs at level a, a = 1..9."""
    return [(a,) * n_ues for a in range(1, 10)]


def calibrate_app_requirements(scenario: ScenarioConfig,
                               safe_setup,
                               horizon: int = DEFAULT_HORIZON_TICKS) -> float:
    """Minimum acceptable reward: mean reward of the moderate-traffic baseline."""
    sim = CellSim(scenario)
    sim.apply_allocation(safe_setup)
    rewards = [per_tick_reward(sim.step_tick()) for _ in range(horizon)]
    return float(np.mean(rewards))


@dataclass
class ScenarioResult:
    rows: list[dict] = field(default_factory=list)

    def mean_reward(self, arm: str, instances=None) -> float:
        values = [
            r["mean_reward"]
            for r in self.rows
            if r["arm"] == arm and (instances is None or r["instance"] in instances)
        ]
        return float(np.mean(values))


def run_escalating_scenario(
    scenario: ScenarioConfig,
    sadr_config: SadrConfig,
    gate_factory: Callable[[], object] | None = None,
    repetitions: int = 10,
    dwell_ticks: int = 600,
    instances: list[tuple[int, ...]] | None = None,
    arms: tuple[str, ...] = ("gated", "ungated"),
    action_set: ActionSet | None = None,
) -> ScenarioResult:
    """Play escalating traffic requests, once twin-gated and once ungated.

    Every (repetition, instance) pair gets a fresh real-side sim whose seed
    does not depend on the arm, so low-demand instances (where the gate never
    triggers) produce bitwise-equal rewards in both arms.
    """
    action_set = action_set or ActionSet()
    instances = instances if instances is not None else default_instances(scenario.n_ues)
    gate = gate_factory() if gate_factory is not None else LocalTwinGate(
        scenario, sadr_config.twin_horizon_ticks
    )
    result = ScenarioResult()
    for rep in range(repetitions):
        for arm in arms:
            for idx, actions in enumerate(instances):
                seed = np.random.SeedSequence([scenario.seed, rep, idx])
                sim = CellSim(ScenarioConfig(
                    n_ues=scenario.n_ues,
                    capacity_mbps=scenario.capacity_mbps,
                    tick_ms=scenario.tick_ms,
                    psr_noise_sigma=scenario.psr_noise_sigma,
                    seed=int(seed.generate_state(1)[0]),
                ))
                request_id = rep * 1000 + idx
                req = TrafficRequest.from_actions(request_id, actions, action_set)
                if arm == "ungated":
                    sim.apply_allocation(req.risk_vector)
                else:
                    controller = SadrController(sadr_config, sim,
                                                send_eval_request=gate.send)
                    decision = controller.on_traffic_request(req)
                    if decision == DEFER_TO_TWIN:
                        evaluation = gate.result(request_id)
                        controller.on_twin_evaluation_completed(evaluation)
                rewards = [per_tick_reward(sim.step_tick())
                           for _ in range(dwell_ticks)]
                result.rows.append({
                    "instance": idx,
                    "arm": arm,
                    "repetition": rep,
                    "mean_reward": round(float(np.mean(rewards)), 9),
                })
    return result
