"""Edge geometry (length, curveness, radius, volume) and GAT-ready feature packing."""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .graph import Edge, VesselGraph

log = logging.getLogger(__name__)

CHORD_EPS = 1e-9
SMOOTH_RADIUS = 2
NODE_DIM = 3
EDGE_DIM = 4


class DesyncError(ValueError):
    """A polyline does not lie inside the mask it was supposedly traced from."""


class EmptyGraphError(ValueError):
    pass


def distance_transform(mask):
    """Exact Euclidean distance from each vessel pixel to the nearest background pixel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros(mask.shape)
    # background beyond the border counts, so pad before transforming
    return ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]


def smooth_polyline(polyline, radius=SMOOTH_RADIUS):
    """Centred moving average whose window shrinks to keep both ends fixed.

    Raw 8-connected pixel chains overstate the length of oblique and curved
    vessels by up to ~8 % (a 22.5 degree line alternates axial and diagonal
    steps).  Averaging over +-2 pixels removes most of that staircase bias
    while leaving axis-aligned and 45 degree runs exactly where they were.
    """
    pts = np.asarray(polyline, dtype=np.float64)
    n = len(pts)
    if n < 3 or radius <= 0:
        return pts
    i = np.arange(n)
    r = np.minimum(np.minimum(i, n - 1 - i), radius)
    csum = np.vstack([np.zeros((1, 2)), np.cumsum(pts, axis=0)])
    return (csum[i + r + 1] - csum[i - r]) / (2 * r + 1)[:, None]


def compute_edge_features(g, mask, radius=None):
    """Return a copy of ``g`` with length, curveness, radius and volume filled in.

    Length is the arc length of the smoothed centreline (see
    :func:`smooth_polyline`).  Radius at each centreline pixel is its exact
    Euclidean distance to background.  Volume integrates a circular
    cross-section with the trapezoid rule: sum over steps of
    pi * (r_a^2 + r_b^2) / 2 * step length.  Self-loops have no chord, so
    their curveness is reported as 1.
    """
    mask = np.asarray(mask, dtype=bool)
    if radius is None:
        radius = distance_transform(mask)
    edges = []
    for e in g.edges:
        pts = np.asarray(e.polyline, dtype=np.int64)
        xs, ys = pts[:, 0], pts[:, 1]
        inside = (xs >= 0) & (xs < mask.shape[1]) & (ys >= 0) & (ys < mask.shape[0])
        if not inside.all() or not mask[ys, xs].all():
            raise DesyncError(f"edge {e.u}-{e.v} leaves the mask")
        steps = np.sqrt((np.diff(smooth_polyline(pts), axis=0) ** 2).sum(axis=1))
        length = float(steps.sum())
        r = radius[ys, xs]
        if e.is_loop:
            curveness = 1.0
        else:
            chord = math.dist(e.polyline[0], e.polyline[-1])
            curveness = length / max(chord, CHORD_EPS)
        volume = float((math.pi * 0.5 * (r[:-1] ** 2 + r[1:] ** 2) * steps).sum())
        edges.append(Edge(e.u, e.v, e.polyline, length, curveness, volume, float(r.mean())))
    out = VesselGraph(g.width, g.height, [type(n)(n.x, n.y, n.degree) for n in g.nodes], edges)
    return out


def extract_graph(mask, prune=3.0):
    """Full pipeline: mask -> skeleton -> topology -> attributed graph."""
    from .skeleton import skeletonize
    from .topology import extract_topology

    mask = np.asarray(mask, dtype=bool)
    return compute_edge_features(extract_topology(skeletonize(mask), prune=prune), mask)


@dataclass
class NormStats:
    """Dataset-level scales for edge features, fitted on training graphs only."""

    r_max: float = 1.0
    rbar_max: float = 1.0

    @classmethod
    def fit(cls, graphs):
        r_max, rbar_max = 0.0, 0.0
        for g in graphs:
            for e in g.edges:
                r_max = max(r_max, e.mean_radius)
                if e.length > 0:
                    rbar_max = max(rbar_max, math.sqrt(e.volume / (math.pi * e.length)))
        return cls(r_max=r_max or 1.0, rbar_max=rbar_max or 1.0)


@dataclass
class GraphFeatures:
    node_feats: np.ndarray  # (N, 3)
    edge_index: np.ndarray  # (2, E) rows are (source, target)
    edge_feats: np.ndarray  # (E, 4)

    @property
    def num_nodes(self):
        return self.node_feats.shape[0]


def normalize_graph(g, stats=None):
    """Scale node/edge attributes and emit a directed edge list.

    Node features: (x / width, y / height, degree / 4).  Edge features:
    (length / diag, curveness - 1, volume / (diag * pi * rbar_max^2),
    mean_radius / r_max).  Every undirected edge appears in both directions;
    self-loops appear once.
    """
    if not g.nodes:
        raise EmptyGraphError("graph has no nodes")
    stats = stats or NormStats()
    w, h = float(g.width), float(g.height)
    diag = math.hypot(w, h)
    node_feats = np.array([[n.x / w, n.y / h, n.degree / 4.0] for n in g.nodes], dtype=np.float64)
    src, dst, feats = [], [], []
    for e in g.edges:
        f = [e.length / diag, e.curveness - 1.0,
             e.volume / (diag * math.pi * stats.rbar_max ** 2), e.mean_radius / stats.r_max]
        src.append(e.u)
        dst.append(e.v)
        feats.append(f)
        if not e.is_loop:
            src.append(e.v)
            dst.append(e.u)
            feats.append(f)
    edge_index = np.array([src, dst], dtype=np.int64).reshape(2, -1)
    edge_feats = np.array(feats, dtype=np.float64).reshape(-1, EDGE_DIM)
    return GraphFeatures(node_feats, edge_index, edge_feats)


def placeholder_features():
    return GraphFeatures(np.zeros((1, NODE_DIM)), np.zeros((2, 0), dtype=np.int64), np.zeros((0, EDGE_DIM)))


def features_or_placeholder(g, stats=None, label=None):
    """normalize_graph, substituting one zero-feature node for an empty graph."""
    try:
        return normalize_graph(g, stats)
    except EmptyGraphError:
        log.warning("empty vessel graph%s; using a single zero-feature node", f" ({label})" if label else "")
        return placeholder_features()
