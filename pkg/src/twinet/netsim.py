"""Deterministic discrete-tick simulator of a downlink cell.

Instantiated twice per experiment: once in the real-world role and once as
the twin. All cross-instance interaction flows through link envelopes; the
instances share no memory. Channel model: per-UE packet success rate
PSR = clamp(min(1, capacity / demand) + gaussian noise, 0, 1), with PSR = 1
by convention when nothing is sent.

Packet size is fixed at 1250 bytes so 1 Mbps corresponds to 100 packets/s.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .link import TOPIC_RW_TRAFFIC, LinkEndpoint, MessageEnvelope

log = logging.getLogger(__name__)

PACKET_BYTES = 1250
PACKETS_PER_MBPS = 100.0  # 1 Mbps / (1250 B * 8 b/B) packets per second

TICK_CSV_SCHEMA = ["tick", "ue", "r_exp", "r_act", "psr", "sent", "received",
                   "mirror_delay_ms"]


@dataclass(frozen=True)
class ScenarioConfig:
    n_ues: int = 3
    capacity_mbps: float = 9.0
    tick_ms: int = 100
    psr_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_ues < 1:
            raise ValueError("n_ues must be >= 1")
        if self.capacity_mbps <= 0:
            raise ValueError("capacity_mbps must be positive")
        if self.tick_ms <= 0:
            raise ValueError("tick_ms must be positive")


@dataclass(frozen=True)
class UEStat:
    r_exp_mbps: float
    r_act_mbps: float
    packets_sent: int
    packets_received: int
    psr: float


@dataclass(frozen=True)
class NetworkState:
    tick_index: int
    ues: tuple[UEStat, ...]
    aggregate_demand_mbps: float


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant rate over time; MGEN-style change points."""

    change_points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        times = [t for t, _ in self.change_points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("change point times must be strictly increasing")

    def rate_at(self, t: float) -> float:
        """Rate of the last change point at or before ``t``; 0 before the first."""
        rate = 0.0
        for t_cp, r_cp in self.change_points:
            if t_cp <= t:  # inclusive at the change point
                rate = r_cp
            else:
                break
        return rate


def compute_psr(r_act_mbps: np.ndarray, capacity_mbps: float, sigma: float,
                rng: np.random.Generator) -> np.ndarray:
    """Per-UE packet success rate under aggregate congestion."""
    n = len(r_act_mbps)
    demand = float(np.sum(r_act_mbps))
    if demand <= 0.0:
        return np.ones(n)  # vacuous delivery: nothing sent, nothing lost
    base = min(1.0, capacity_mbps / demand)
    noise = rng.normal(0.0, sigma, n) if sigma > 0 else np.zeros(n)
    return np.clip(base + noise, 0.0, 1.0)


class CellSim:
    """One tick-driven cell instance (real-world or twin role)."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.tick_index = 0
        self.r_exp = np.zeros(config.n_ues)
        self.r_act = np.zeros(config.n_ues)
        self._pending: tuple[np.ndarray, np.ndarray] | None = None
        self.last_state: NetworkState | None = None
        self.tick_log: list[NetworkState] = []
        # mirroring bookkeeping
        self.last_applied_update_tick = -1
        self.stale_updates = 0
        self.mirror_delays_ms: list[float] = []
        self._mirror_delay_by_tick: dict[int, float] = {}

    def apply_allocation(self, rates_mbps, expected_mbps=None) -> None:
        """Stage granted rates (and the rates the UEs expected, defaulting to
        the grant itself); takes effect at the next tick boundary."""
        rates = np.asarray(rates_mbps, dtype=float)
        if rates.shape != (self.config.n_ues,):
            raise ValueError(
                f"expected {self.config.n_ues} rates, got shape {rates.shape}"
            )
        if np.any(rates < 0):
            raise ValueError("rates must be non-negative")
        if expected_mbps is None:
            expected = rates.copy()
        else:
            expected = np.asarray(expected_mbps, dtype=float)
            if expected.shape != rates.shape:
                raise ValueError("expected rates must match n_ues")
            if np.any(expected < rates - 1e-12):
                raise ValueError("granted rate may not exceed expected rate")
        self._pending = (rates, expected)

    def step_tick(self) -> NetworkState:
        """Advance one tick: apply pending allocation, draw PSR, move packets."""
        if self._pending is not None:
            self.r_act, self.r_exp = self._pending
            self._pending = None
        psr = compute_psr(self.r_act, self.config.capacity_mbps,
                          self.config.psr_noise_sigma, self.rng)
        tick_s = self.config.tick_ms / 1000.0
        sent = np.rint(self.r_act * PACKETS_PER_MBPS * tick_s).astype(int)
        received = self.rng.binomial(sent, psr)
        ues = tuple(
            UEStat(
                r_exp_mbps=float(self.r_exp[i]),
                r_act_mbps=float(self.r_act[i]),
                packets_sent=int(sent[i]),
                packets_received=int(received[i]),
                psr=float(psr[i]),
            )
            for i in range(self.config.n_ues)
        )
        state = NetworkState(
            tick_index=self.tick_index,
            ues=ues,
            aggregate_demand_mbps=float(np.sum(self.r_act)),
        )
        self.tick_index += 1
        self.last_state = state
        self.tick_log.append(state)
        return state

    # -- traffic mirroring ----------------------------------------------------

    def publish_observation(self, link: LinkEndpoint,
                            topic: str = TOPIC_RW_TRAFFIC) -> MessageEnvelope:
        """Real side: publish this tick's observed per-UE rates."""
        if self.last_state is None:
            raise RuntimeError("no tick has been stepped yet")
        rates = [ue.r_act_mbps for ue in self.last_state.ues]
        payload = json.dumps(
            {
                "tick": self.last_state.tick_index,
                "rates_mbps": rates,
                "packets_per_s": [r * PACKETS_PER_MBPS for r in rates],
            },
            separators=(",", ":"),
        ).encode("utf-8")
        return link.publish_envelope(topic, "TrafficUpdate", payload)

    def apply_mirror_update(self, envelope: MessageEnvelope) -> float | None:
        """Twin side: set the traffic generator to the received rates.

        Stale or duplicate updates (tick at or below the last applied one) are
        ignored and counted. Returns the mirror delay in ms, or None if stale.
        """
        if envelope.kind != "TrafficUpdate":
            raise ValueError(f"not a TrafficUpdate envelope: {envelope.kind}")
        update = json.loads(envelope.payload)
        if update["tick"] <= self.last_applied_update_tick:
            self.stale_updates += 1
            return None
        self.apply_allocation(update["rates_mbps"])
        self.last_applied_update_tick = update["tick"]
        delay_ms = (time.time_ns() // 1_000 - envelope.sent_at) / 1_000.0
        self.mirror_delays_ms.append(delay_ms)
        self._mirror_delay_by_tick[self.tick_index] = delay_ms  # applies next tick
        return delay_ms

    # -- metrics --------------------------------------------------------------

    def tick_rows(self) -> list[dict]:
        """Per-tick metrics rows in the canonical CSV schema."""
        rows = []
        for state in self.tick_log:
            delay = self._mirror_delay_by_tick.get(state.tick_index)
            for i, ue in enumerate(state.ues):
                rows.append({
                    "tick": state.tick_index,
                    "ue": i,
                    "r_exp": ue.r_exp_mbps,
                    "r_act": ue.r_act_mbps,
                    "psr": round(ue.psr, 6),
                    "sent": ue.packets_sent,
                    "received": ue.packets_received,
                    "mirror_delay_ms": round(delay, 3) if (delay is not None and i == 0) else "",
                })
        return rows
