"""Exception hierarchy shared by every layer of the package."""


class StreamError(Exception):
    """Base class for all errors raised by chanstream."""


class SchemaError(StreamError):
    """An element schema is malformed or unacceptable."""


class SchemaViolationError(StreamError):
    """Values do not fit the schema they are being encoded with."""


class FramingError(StreamError):
    """Bytes on a link do not form a valid frame."""


class ProtocolError(StreamError):
    """A peer sent something the protocol does not allow at this point."""


class TransportConnectionError(StreamError, ConnectionError):
    """A peer could not be reached during rendezvous."""


class LinkClosedError(StreamError):
    """The link is closed (locally or by the peer)."""


class AbortedError(StreamError):
    """The run was aborted while this endpoint was waiting."""


class ChannelCreationError(StreamError):
    """Channel creation failed (e.g. no producers or no consumers)."""


class InvalidChannelError(StreamError):
    """The channel has been freed or was never usable."""


class AlreadyFreedError(InvalidChannelError):
    pass


class InUseError(StreamError):
    """The channel still has open streams."""


class SchemaMismatchError(StreamError):
    """Producer and consumer attached incompatible schemas."""

    def __init__(self, local_digest: int, remote_digest: int, remote_rank: int):
        self.local_digest = local_digest
        self.remote_digest = remote_digest
        self.remote_rank = remote_rank
        super().__init__(
            f"schema mismatch: local digest {local_digest:#018x} != "
            f"{remote_digest:#018x} from rank {remote_rank}"
        )


class StreamTerminatedError(StreamError):
    """Send on a stream this producer already terminated."""


class AlreadyTerminatedError(StreamTerminatedError):
    pass


class RoutingError(StreamError):
    """A routing policy picked a consumer that does not exist."""


class MetricsError(StreamError):
    pass


class ConfigError(StreamError):
    """A run configuration is invalid; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
