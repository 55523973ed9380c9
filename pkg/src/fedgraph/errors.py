"""Shared exception types."""


class FedgraphError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(FedgraphError):
    """Attribute schema is inconsistent with the data or across parties."""


class DataError(FedgraphError):
    """Input data violates a precondition (dangling edge, bad value, ...)."""


class ConfigError(FedgraphError):
    """Invalid or contradictory configuration."""


class TrainingError(FedgraphError):
    """Model training produced a non-finite update."""


class ProtocolError(FedgraphError):
    """A federation message violates the wire contract."""


class TransportError(FedgraphError):
    """A transport-level failure (disconnect, framing, timeout)."""
