from .errors import (
    BadTopicError,
    ChecksumError,
    CodecError,
    FilterError,
    LengthMismatchError,
    MalformedVarintError,
    TruncatedFrameError,
    UnknownPacketTypeError,
)
from .packets import (
    ConnAck,
    Connect,
    ControlPacket,
    Disconnect,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    SubAck,
    Subscribe,
)
from .codec import (
    MAX_REMAINING_LENGTH,
    decode_packet,
    decode_remaining_length,
    encode_packet,
    encode_remaining_length,
    read_packet,
)
from .topics import TopicFilter, topic_matches, validate_filter, validate_topic

__all__ = [
    "BadTopicError",
    "ChecksumError",
    "CodecError",
    "ConnAck",
    "Connect",
    "ControlPacket",
    "Disconnect",
    "FilterError",
    "LengthMismatchError",
    "MAX_REMAINING_LENGTH",
    "MalformedVarintError",
    "PingReq",
    "PingResp",
    "PubAck",
    "Publish",
    "SubAck",
    "Subscribe",
    "TopicFilter",
    "TruncatedFrameError",
    "UnknownPacketTypeError",
    "decode_packet",
    "decode_remaining_length",
    "encode_packet",
    "encode_remaining_length",
    "read_packet",
    "topic_matches",
    "validate_filter",
    "validate_topic",
]
