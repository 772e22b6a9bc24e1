"""Exception hierarchy shared across the package."""


class RosflError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RosflError):
    """Invalid shapes, ranges, or config values caught before running."""


class NumericError(RosflError):
    """NaN/Inf appeared where only finite values are allowed."""


class ProtocolMisuseError(RosflError):
    """Operations called out of order (backward before forward, stale
    head context, boundary tensor with the wrong shape)."""


class WireError(RosflError):
    """Base class for wire-format and transport failures."""


class WireProtocolError(WireError):
    """Bad magic bytes or unsupported protocol version."""


class FramingError(WireError):
    """Frame shorter than its declared length."""


class CorruptionError(WireError):
    """Frame decodes but its payload is internally inconsistent."""


class ChannelClosed(WireError):
    """The peer closed the channel; distinguishable from corruption."""
