"""Binary vessel mask -> skeleton -> attributed vessel graph."""
from .features import (
    EDGE_DIM,
    NODE_DIM,
    DesyncError,
    EmptyGraphError,
    GraphFeatures,
    NormStats,
    compute_edge_features,
    distance_transform,
    extract_graph,
    features_or_placeholder,
    normalize_graph,
    placeholder_features,
)
from .graph import Edge, GraphFormatError, Node, VesselGraph, deserialize, load_graph, save_graph, serialize
from .skeleton import is_thin, skeletonize
from .topology import NotThinError, arc_length, check_graph, extract_topology
