"""Exception hierarchy shared by every component."""


class SplitStreamError(Exception):
    pass


class ConfigurationError(SplitStreamError):
    """Shapes, ratios or settings that cannot work together."""


class DataError(SplitStreamError):
    """Input values outside the domain of an operation."""


class InternalError(SplitStreamError):
    pass


class ProtocolError(SplitStreamError):
    """Malformed or out-of-order frame. Fatal for the connection."""


class NeedMoreBytes(SplitStreamError):
    """The buffer holds an incomplete frame; nothing was consumed."""


class HandshakeError(ProtocolError):
    def __init__(self, message: str, reason: int = 0):
        super().__init__(message)
        self.reason = reason


class TransportClosed(SplitStreamError):
    """Peer went away. Retryable."""


class SessionTimeout(TransportClosed):
    pass
