"""Timestamped message envelopes over the broker, plus the payload-size
latency benchmark.

Envelopes are canonical JSON with a fixed key order so that a byte-for-byte
round trip holds; only model artifact payloads are binary, carried as base64
inside the envelope.

Canonical topic namespace: rw/traffic, rw/request, dt/traffic,
dt/eval/result, dt/model/request, dt/model/artifact, bench/ping/<dir>,
bench/pong/<dir>.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import statistics
import threading
import time
from dataclasses import dataclass, field

from .client import MqttClient

log = logging.getLogger(__name__)

KINDS = (
    "TrafficUpdate",
    "EvalRequest",
    "EvalResult",
    "ModelRequest",
    "ModelArtifactMsg",
    "BenchPing",
    "BenchPong",
)

TOPIC_RW_TRAFFIC = "rw/traffic"
TOPIC_RW_REQUEST = "rw/request"
TOPIC_DT_TRAFFIC = "dt/traffic"
TOPIC_DT_EVAL_RESULT = "dt/eval/result"
TOPIC_DT_MODEL_REQUEST = "dt/model/request"
TOPIC_DT_MODEL_ARTIFACT = "dt/model/artifact"

BENCH_SIZES = (1, 100, 1_000, 10_000, 100_000, 1_000_000)
BENCH_SAMPLES = 100

BENCH_CSV_SCHEMA = ["size_bytes", "direction", "mean_ms", "p50_ms", "p99_ms", "n"]


class EnvelopeError(ValueError):
    """Envelope JSON is missing keys, has an unknown kind, or bad base64."""


@dataclass
class MessageEnvelope:
    topic: str
    seq: int
    sent_at: int  # microseconds since the unix epoch, stamped at publish time
    kind: str
    payload: bytes = b""
    recv_at: int | None = None  # set by the receiving endpoint, not serialized

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise EnvelopeError(f"unknown envelope kind: {self.kind!r}")


def encode_envelope(envelope: MessageEnvelope) -> bytes:
    obj = {
        "topic": envelope.topic,
        "seq": envelope.seq,
        "sent_at": envelope.sent_at,
        "kind": envelope.kind,
        "payload_b64": base64.b64encode(envelope.payload).decode("ascii"),
    }
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def decode_envelope(data: bytes) -> MessageEnvelope:
    try:
        obj = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EnvelopeError(f"envelope is not valid JSON: {exc}") from exc
    try:
        topic = obj["topic"]
        seq = obj["seq"]
        sent_at = obj["sent_at"]
        kind = obj["kind"]
        payload_b64 = obj["payload_b64"]
    except KeyError as exc:
        raise EnvelopeError(f"envelope missing key {exc}") from exc
    try:
        payload = base64.b64decode(payload_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise EnvelopeError(f"invalid base64 payload: {exc}") from exc
    return MessageEnvelope(topic=topic, seq=seq, sent_at=sent_at, kind=kind,
                           payload=payload)


def now_us() -> int:
    return time.time_ns() // 1_000


class LinkEndpoint:
    """One endpoint of the real-world/twin link.

    Owns one broker connection. Publishing stamps sent_at and a per-topic
    sequence number; polling returns envelopes in arrival order with seq-gap
    accounting.
    """

    def __init__(self, client_id: str, host: str, port: int, qos: int = 1,
                 connect_retries: int = 5, backoff_s: float = 0.05):
        self.client = MqttClient(client_id, host, port,
                                 connect_retries=connect_retries,
                                 backoff_s=backoff_s)
        self.qos = qos
        self._seq_lock = threading.Lock()
        self._next_seq: dict[str, int] = {}
        self._last_seen_seq: dict[tuple[str, str], int] = {}
        self.gap_count = 0

    def connect(self) -> None:
        self.client.connect()

    def close(self) -> None:
        self.client.close()

    def __enter__(self) -> "LinkEndpoint":
        self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def subscribe(self, *filters: str) -> None:
        for filter_text in filters:
            self.client.subscribe(filter_text, max_qos=self.qos)

    def publish_envelope(self, topic: str, kind: str,
                         payload: bytes = b"") -> MessageEnvelope:
        """Stamp and send; returns the envelope as published."""
        with self._seq_lock:
            seq = self._next_seq.get(topic, 0)
            self._next_seq[topic] = seq + 1
        envelope = MessageEnvelope(topic=topic, seq=seq, sent_at=0, kind=kind,
                                   payload=payload)
        envelope.sent_at = now_us()  # stamped at publish time, not construction
        self.client.publish(topic, encode_envelope(envelope), qos=self.qos)
        return envelope

    def poll_envelope(self, timeout: float | None = 0.0) -> MessageEnvelope | None:
        """Next received envelope in arrival order, or None on timeout."""
        item = self.client.poll(timeout)
        if item is None:
            return None
        topic, payload, recv_ns = item
        envelope = decode_envelope(payload)
        envelope.recv_at = recv_ns // 1_000
        key = (envelope.kind, envelope.topic)
        last = self._last_seen_seq.get(key)
        if last is not None and envelope.seq > last + 1:
            self.gap_count += envelope.seq - last - 1
        self._last_seen_seq[key] = max(envelope.seq, last or 0)
        return envelope


# -- latency benchmark -------------------------------------------------------


@dataclass
class LatencyReport:
    payload_size: int
    direction: str  # "real->twin" | "twin->real"
    samples_ms: list[float] = field(default_factory=list)
    discarded: int = 0

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def p50_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def p99_ms(self) -> float:
        ordered = sorted(self.samples_ms)
        index = min(len(ordered) - 1, round(0.99 * (len(ordered) - 1)))
        return ordered[index]

    def to_row(self) -> dict:
        return {
            "size_bytes": self.payload_size,
            "direction": self.direction,
            "mean_ms": round(self.mean_ms, 4),
            "p50_ms": round(self.p50_ms, 4),
            "p99_ms": round(self.p99_ms, 4),
            "n": len(self.samples_ms),
        }


def run_latency_bench(host: str, port: int,
                      sizes=BENCH_SIZES,
                      samples_per_size: int = BENCH_SAMPLES,
                      rng=None) -> list[LatencyReport]:
    """One-way latency per payload size and direction over an idle broker.

    Both endpoints run in this process and share the host clock, so one-way
    latency is the direct difference between receive time and the publish
    stamp. Samples are serialized (send, wait for receipt) to keep the
    broker idle; negative samples from clock jitter are discarded and counted.
    """
    import random

    rng = rng or random.Random(0)
    reports: list[LatencyReport] = []
    with LinkEndpoint("bench-real", host, port, qos=1) as real, \
         LinkEndpoint("bench-twin", host, port, qos=1) as twin:
        real.subscribe("bench/ping/dt2rw")
        twin.subscribe("bench/ping/rw2dt")
        pairs = [("real->twin", real, twin, "bench/ping/rw2dt"),
                 ("twin->real", twin, real, "bench/ping/dt2rw")]
        # warm-up: prime sockets and codec paths outside the measurements
        for _, sender, receiver, topic in pairs:
            sender.publish_envelope(topic, "BenchPing", b"x")
            receiver.poll_envelope(timeout=5.0)
        for size in sizes:
            for direction, sender, receiver, topic in pairs:
                report = LatencyReport(payload_size=size, direction=direction)
                for _ in range(samples_per_size):
                    payload = rng.randbytes(size)
                    sender.publish_envelope(topic, "BenchPing", payload)
                    received = receiver.poll_envelope(timeout=30.0)
                    if received is None:
                        raise TimeoutError(
                            f"bench ping lost at size {size} ({direction})"
                        )
                    latency_ms = (received.recv_at - received.sent_at) / 1_000.0
                    if latency_ms < 0:
                        report.discarded += 1
                    else:
                        report.samples_ms.append(latency_ms)
                reports.append(report)
                log.info("bench %s %dB mean=%.3fms", direction, size,
                         report.mean_ms)
    return reports
