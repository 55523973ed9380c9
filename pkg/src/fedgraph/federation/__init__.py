"""Coordinator/client protocol: initialization, per-round updates, and
server-side aggregation over pluggable transports."""

from .config import RunConfig
from .index import GlobalIndex
from .client import ClientNode
from .server import Coordinator, RunControl, RunResult, RoundMetrics
from .transport import (
    InProcessEndpoint,
    TcpCoordinatorListener,
    run_client_over_tcp,
)

__all__ = [
    "ClientNode",
    "Coordinator",
    "GlobalIndex",
    "InProcessEndpoint",
    "RoundMetrics",
    "RunConfig",
    "RunControl",
    "RunResult",
    "TcpCoordinatorListener",
    "run_client_over_tcp",
]
