"""Minimal MQTT client for the link endpoints.

One broker connection per client; a reader thread feeds received publishes
into an ordered queue. Publishing while disconnected triggers bounded
reconnect-with-backoff, after which the failure is surfaced.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from .mqtt import (
    ConnAck,
    Connect,
    Disconnect,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    SubAck,
    Subscribe,
    CodecError,
    encode_packet,
    read_packet,
)

log = logging.getLogger(__name__)


class BrokerUnreachableError(ConnectionError):
    """Raised once the reconnect retry budget is exhausted."""


class MqttClient:
    def __init__(self, client_id: str, host: str, port: int,
                 connect_retries: int = 5, backoff_s: float = 0.05,
                 ack_timeout_s: float = 10.0):
        self.client_id = client_id
        self.host = host
        self.port = port
        self.connect_retries = connect_retries
        self.backoff_s = backoff_s
        self.ack_timeout_s = ack_timeout_s
        self.messages: "queue.Queue[tuple[str, bytes, int]]" = queue.Queue()
        self._sock: socket.socket | None = None
        self._stream = None
        self._reader: threading.Thread | None = None
        self._acks: "queue.Queue[object]" = queue.Queue()
        self._io_lock = threading.RLock()
        self._next_packet_id = 1
        self._subscriptions: list[tuple[str, int]] = []
        self._closed = False

    # -- connection ----------------------------------------------------------

    def connect(self) -> None:
        """Connect with bounded retries and exponential backoff."""
        delay = self.backoff_s
        last_error: Exception | None = None
        for attempt in range(self.connect_retries):
            try:
                self._connect_once()
                return
            except OSError as exc:
                last_error = exc
                log.debug("connect attempt %d failed: %s", attempt + 1, exc)
                time.sleep(delay)
                delay *= 2
        raise BrokerUnreachableError(
            f"broker {self.host}:{self.port} unreachable "
            f"after {self.connect_retries} attempts: {last_error}"
        )

    def _connect_once(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=5.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        stream = sock.makefile("rb")
        sock.sendall(encode_packet(Connect(self.client_id)))
        ack = read_packet(stream)
        if not isinstance(ack, ConnAck) or ack.return_code != 0:
            sock.close()
            raise ConnectionError(f"connect refused: {ack!r}")
        self._sock = sock
        self._stream = stream
        self._reader = threading.Thread(
            target=self._read_loop, name=f"mqtt-reader-{self.client_id}", daemon=True
        )
        self._reader.start()

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def close(self) -> None:
        self._closed = True
        with self._io_lock:
            if self._sock is not None:
                try:
                    self._sock.sendall(encode_packet(Disconnect()))
                except OSError:
                    pass
                self._teardown()

    def _teardown(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self._stream = None

    def _reconnect(self) -> None:
        self._teardown()
        self.connect()
        for filter_text, max_qos in self._subscriptions:
            self._subscribe_once(filter_text, max_qos)

    # -- reader --------------------------------------------------------------

    def _read_loop(self) -> None:
        stream = self._stream
        try:
            while True:
                packet = read_packet(stream)
                if packet is None:
                    return
                if isinstance(packet, Publish):
                    if packet.qos == 1:
                        self._send(PubAck(packet.packet_id))
                    self.messages.put((packet.topic, packet.payload, time.time_ns()))
                elif isinstance(packet, (SubAck, PubAck, PingResp)):
                    self._acks.put(packet)
        except (CodecError, OSError, ValueError):
            return

    # -- requests ------------------------------------------------------------

    def _send(self, packet) -> None:
        with self._io_lock:
            if self._sock is None:
                raise ConnectionError("not connected")
            self._sock.sendall(encode_packet(packet))

    def _take_packet_id(self) -> int:
        pid = self._next_packet_id
        self._next_packet_id = pid % 0xFFFF + 1
        return pid

    def _wait_ack(self, kind, packet_id: int):
        deadline = time.monotonic() + self.ack_timeout_s
        while True:
            timeout = deadline - time.monotonic()
            if timeout <= 0:
                raise TimeoutError(f"no {kind.__name__} for packet id {packet_id}")
            try:
                ack = self._acks.get(timeout=timeout)
            except queue.Empty:
                continue
            if isinstance(ack, kind) and ack.packet_id == packet_id:
                return ack

    def subscribe(self, filter_text: str, max_qos: int = 0) -> None:
        with self._io_lock:
            self._subscribe_once(filter_text, max_qos)
            self._subscriptions.append((filter_text, max_qos))

    def _subscribe_once(self, filter_text: str, max_qos: int) -> None:
        pid = self._take_packet_id()
        self._send(Subscribe(pid, ((filter_text, max_qos),)))
        self._wait_ack(SubAck, pid)

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> None:
        """Publish, transparently reconnecting (bounded) on a dead connection."""
        with self._io_lock:
            pid = self._take_packet_id() if qos == 1 else None
            packet = Publish(topic, payload, qos, pid)
            try:
                self._send(packet)
            except (ConnectionError, OSError):
                if self._closed:
                    raise
                self._reconnect()
                self._send(packet)
            if qos == 1:
                self._wait_ack(PubAck, pid)

    def ping(self) -> None:
        with self._io_lock:
            self._send(PingReq())
        deadline = time.monotonic() + self.ack_timeout_s
        while time.monotonic() < deadline:
            try:
                ack = self._acks.get(timeout=0.1)
            except queue.Empty:
                continue
            if isinstance(ack, PingResp):
                return
        raise TimeoutError("no ping response")

    def poll(self, timeout: float | None = 0.0) -> tuple[str, bytes, int] | None:
        """Next received (topic, payload, recv_ns) in arrival order, or None."""
        try:
            if timeout is None:
                return self.messages.get()
            if timeout == 0:
                return self.messages.get_nowait()
            return self.messages.get(timeout=timeout)
        except queue.Empty:
            return None
