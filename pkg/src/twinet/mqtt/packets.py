"""Control packet variants for the MQTT 3.1.1 subset used by the link.

Only the nine packet types the broker and clients exchange are modelled:
no retained messages, wills, QoS 2, or session persistence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union


@dataclass(frozen=True)
class Connect:
    client_id: str


@dataclass(frozen=True)
class ConnAck:
    return_code: int = 0


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None

    def __post_init__(self) -> None:
        if self.qos not in (0, 1):
            raise ValueError(f"qos must be 0 or 1, got {self.qos}")
        if self.qos == 1 and self.packet_id is None:
            raise ValueError("qos=1 publish requires a packet_id")
        if self.qos == 0 and self.packet_id is not None:
            raise ValueError("qos=0 publish must not carry a packet_id")


@dataclass(frozen=True)
class PubAck:
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "filters", tuple((f, q) for f, q in self.filters))
        for _, q in self.filters:
            if q not in (0, 1):
                raise ValueError(f"max_qos must be 0 or 1, got {q}")


@dataclass(frozen=True)
class SubAck:
    packet_id: int
    granted: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "granted", tuple(self.granted))


@dataclass(frozen=True)
class PingReq:
    pass


@dataclass(frozen=True)
class PingResp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


ControlPacket = Union[
    Connect, ConnAck, Publish, PubAck, Subscribe, SubAck, PingReq, PingResp, Disconnect
]
