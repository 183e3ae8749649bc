"""Single data broker: accepts client connections, maintains subscriptions,
routes publishes to every matching subscriber.

One handler thread per connection. The session/subscription table is guarded
by a single lock so that routing a publish is atomic with respect to
subscription changes, which also gives global FIFO ordering per
(publisher, topic, subscriber).
"""

from __future__ import annotations

import csv
import logging
import socket
import threading
from dataclasses import dataclass, field

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
    TopicFilter,
    CodecError,
    encode_packet,
    read_packet,
    topic_matches,
    validate_filter,
)

log = logging.getLogger(__name__)

STATS_SCHEMA = ["counter", "value"]


@dataclass
class Session:
    client_id: str
    subscriptions: list[tuple[TopicFilter, int]] = field(default_factory=list)
    connected: bool = True
    next_outbound_packet_id: int = 1

    def take_packet_id(self) -> int:
        pid = self.next_outbound_packet_id
        self.next_outbound_packet_id = pid % 0xFFFF + 1
        return pid


class _Connection:
    """Server side of one client socket."""

    def __init__(self, broker: "Broker", sock: socket.socket):
        self.broker = broker
        self.sock = sock
        self.stream = sock.makefile("rb")
        self.session: Session | None = None
        self._send_lock = threading.Lock()
        self.alive = True

    def send(self, packet) -> bool:
        data = encode_packet(packet)
        with self._send_lock:
            if not self.alive:
                return False
            try:
                self.sock.sendall(data)
            except OSError:
                self.alive = False
                return False
        self.broker._count("bytes_out", len(data))
        return True

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def run(self) -> None:
        try:
            self._serve()
        except (CodecError, OSError, ValueError) as exc:
            log.debug("connection closed on error: %s", exc)
        finally:
            self.broker._drop_connection(self)
            self.close()

    def _serve(self) -> None:
        first = read_packet(self.stream)
        if not isinstance(first, Connect):
            log.debug("first packet was %r, closing", first)
            return
        self.broker._register(self, first.client_id)
        self.send(ConnAck(0))
        while self.alive:
            packet = read_packet(self.stream)
            if packet is None or isinstance(packet, Disconnect):
                return
            if isinstance(packet, Publish):
                self.broker.route_publish(self, packet)
            elif isinstance(packet, Subscribe):
                granted = self.broker._subscribe(self, packet)
                self.send(SubAck(packet.packet_id, granted))
            elif isinstance(packet, PingReq):
                self.send(PingResp())
            elif isinstance(packet, PubAck):
                pass  # subscriber-side qos-1 ack; no retransmission state kept
            else:
                log.debug("unexpected packet %r, closing", packet)
                return


class Broker:
    """Threaded TCP pub/sub broker for the MQTT 3.1.1 subset."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 stats_csv: str | None = None):
        self.host = host
        self.port = port
        self.stats_csv = stats_csv
        self._table_lock = threading.Lock()
        self._sessions: dict[str, _Connection] = {}
        self._stats_lock = threading.Lock()
        self.stats: dict[str, int] = {
            "connections": 0,
            "publishes_routed": 0,
            "deliveries": 0,
            "bytes_in": 0,
            "bytes_out": 0,
        }
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._stopping = threading.Event()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((self.host, self.port))
        except OSError as exc:
            listener.close()
            raise OSError(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        listener.listen(64)
        self.port = listener.getsockname()[1]
        self._listener = listener
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="broker-accept", daemon=True
        )
        self._accept_thread.start()
        log.info("broker listening on %s:%d", self.host, self.port)

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._table_lock:
            conns = list(self._sessions.values())
        for conn in conns:
            conn.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        if self.stats_csv:
            self.dump_stats(self.stats_csv)

    def __enter__(self) -> "Broker":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock)
            threading.Thread(target=conn.run, name="broker-conn", daemon=True).start()

    # -- session table -------------------------------------------------------

    def _register(self, conn: _Connection, client_id: str) -> None:
        with self._table_lock:
            prior = self._sessions.get(client_id)
            if prior is not None:
                prior.alive = False
                prior.close()
            conn.session = Session(client_id=client_id)
            self._sessions[client_id] = conn
        self._count("connections", 1)

    def _drop_connection(self, conn: _Connection) -> None:
        if conn.session is None:
            return
        with self._table_lock:
            if self._sessions.get(conn.session.client_id) is conn:
                del self._sessions[conn.session.client_id]
            conn.session.connected = False
            conn.session.subscriptions.clear()

    def _subscribe(self, conn: _Connection, packet: Subscribe) -> tuple[int, ...]:
        if conn.session is None:
            raise ValueError("subscribe before connect")
        granted = []
        with self._table_lock:
            for filter_text, max_qos in packet.filters:
                topic_filter = validate_filter(filter_text)
                conn.session.subscriptions.append((topic_filter, max_qos))
                granted.append(max_qos)
        return tuple(granted)

    # -- routing -------------------------------------------------------------

    def route_publish(self, publisher: _Connection, pub: Publish) -> int:
        """Deliver to every session with a matching filter; returns delivery count.

        Overlapping filters within one session deliver a single copy at the
        highest granted qos. Publisher is acked iff the publish was qos 1,
        regardless of whether anyone matched.
        """
        if publisher.session is None:
            raise ValueError("publish before connect")
        delivered = 0
        with self._table_lock:
            for conn in self._sessions.values():
                session = conn.session
                if session is None or not conn.alive:
                    continue
                matched = [
                    max_qos
                    for topic_filter, max_qos in session.subscriptions
                    if topic_matches(topic_filter, pub.topic)
                ]
                if not matched:
                    continue
                qos = min(pub.qos, max(matched))
                pid = session.take_packet_id() if qos == 1 else None
                if conn.send(Publish(pub.topic, pub.payload, qos, pid)):
                    delivered += 1
        self._count("bytes_in", len(pub.payload))
        self._count("publishes_routed", 1)
        self._count("deliveries", delivered)
        if pub.qos == 1:
            publisher.send(PubAck(pub.packet_id))
        return delivered

    # -- stats ---------------------------------------------------------------

    def _count(self, key: str, amount: int) -> None:
        with self._stats_lock:
            self.stats[key] = self.stats.get(key, 0) + amount

    def dump_stats(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STATS_SCHEMA)
            for key in sorted(self.stats):
                writer.writerow([key, self.stats[key]])


def run_broker(bind_address: str = "127.0.0.1:1883",
               stats_csv: str | None = None,
               shutdown: threading.Event | None = None) -> Broker:
    """Serve until ``shutdown`` is set (or forever); returns the stopped broker."""
    host, _, port_text = bind_address.partition(":")
    broker = Broker(host or "127.0.0.1", int(port_text or 0), stats_csv=stats_csv)
    broker.start()
    try:
        if shutdown is None:
            shutdown = threading.Event()
        shutdown.wait()
    finally:
        broker.stop()
    return broker
