"""Privacy-preserving federated graph representations.

A coordinator and K clients, each holding a private graph, jointly compute
embedding, attribute, and structure representations without moving raw graph
data, and expose them to an interactive analysis workbench.
"""

from .graph import (
    AttributeKind,
    AttributeSchema,
    LocalGraph,
    TopologyMetricKind,
    load_graph,
    local_attribute_stats,
    topology_metric,
)
from .embedding import SkipGramConfig, WalkConfig
from .privacy import Mechanism, PrivacyConfig
from .representation import (
    AttributeHistogram,
    FederatedRepresentation,
    FilterCondition,
    HistogramSpec,
    reconstruct_structure,
)
from .federation import ClientNode, Coordinator, GlobalIndex, RunConfig

__version__ = "0.1.0"

__all__ = [
    "AttributeHistogram",
    "AttributeKind",
    "AttributeSchema",
    "ClientNode",
    "Coordinator",
    "FederatedRepresentation",
    "FilterCondition",
    "GlobalIndex",
    "HistogramSpec",
    "LocalGraph",
    "Mechanism",
    "PrivacyConfig",
    "RunConfig",
    "SkipGramConfig",
    "TopologyMetricKind",
    "WalkConfig",
    "load_graph",
    "local_attribute_stats",
    "reconstruct_structure",
    "topology_metric",
    "__version__",
]
