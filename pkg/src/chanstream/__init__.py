"""Typed element streams between producer and consumer process groups."""

from .core import (
    Element,
    Field,
    Frame,
    FrameKind,
    Hello,
    ScalarKind,
    StreamSchema,
    decode_element,
    encode_element,
    parse_frame,
    schema_digest,
)
from .errors import *  # noqa: F401,F403
from .harness import RankMetrics, aggregate
from .runtime import (
    BOTH,
    BYSTANDER,
    CONSUMER,
    PRODUCER,
    Channel,
    Endpoint,
    Fixed,
    KeyHash,
    OperationSet,
    Role,
    RoundRobin,
    Status,
    Stream,
    attach,
    create_channel,
    free_channel,
    operate,
    send,
    terminate,
)
from .transport import LoopbackNetwork, LoopbackTransport, SocketTransport

__version__ = "0.1.0"
