"""Edge-aware graph attention encoder over batched vessel graphs."""
from dataclasses import dataclass

import numpy as np

from ..numcore import (
    ShapeError,
    Tensor,
    as_tensor,
    elu,
    exp,
    leaky_relu,
    matmul,
    mul,
    reshape,
    segment_max,
    segment_mean,
    segment_sum,
    sub,
    sum_,
    take,
)
from ..vesselgraph import EDGE_DIM, NODE_DIM
from .module import Module, kaiming_uniform, param

LEAKY_SLOPE = 0.2


@dataclass
class GatConfig:
    heads: tuple = (4, 4, 2)
    channels: tuple = (10, 50, 256)
    node_dim: int = NODE_DIM
    edge_dim: int = EDGE_DIM
    pooling: str = "mean"

    def __post_init__(self):
        self.heads, self.channels = tuple(self.heads), tuple(self.channels)
        if len(self.heads) != len(self.channels):
            raise ValueError("heads and channels need one entry per layer")
        if self.pooling not in ("mean", "max", "sum"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def d_out(self):
        return self.heads[-1] * self.channels[-1]


@dataclass
class GraphBatch:
    """Disjoint union of graphs, self-loops already appended."""

    x: np.ndarray  # (N, node_dim)
    src: np.ndarray  # (E,) neighbour v
    dst: np.ndarray  # (E,) receiving node u
    edge_feats: np.ndarray  # (E, edge_dim)
    graph_id: np.ndarray  # (N,)
    num_graphs: int

    @property
    def num_nodes(self):
        return self.x.shape[0]


def collate(features):
    """Stack GraphFeatures into one GraphBatch, adding a zero-feature self-loop per node."""
    xs, srcs, dsts, efs, gids = [], [], [], [], []
    offset = 0
    for g, f in enumerate(features):
        n = f.node_feats.shape[0]
        if n == 0:
            raise ValueError(f"graph {g} has no nodes")
        ei = np.asarray(f.edge_index, dtype=np.int64).reshape(2, -1)
        if ei.size and (ei.min() < 0 or ei.max() >= n):
            raise IndexError(f"graph {g}: edge index out of range for {n} nodes")
        loops = np.arange(n)
        xs.append(f.node_feats)
        srcs += [ei[0] + offset, loops + offset]
        dsts += [ei[1] + offset, loops + offset]
        efs += [f.edge_feats, np.zeros((n, f.edge_feats.shape[1] if f.edge_feats.ndim == 2 else EDGE_DIM))]
        gids.append(np.full(n, g, dtype=np.int64))
        offset += n
    if not xs:
        raise ValueError("empty graph batch")
    return GraphBatch(np.vstack(xs), np.concatenate(srcs), np.concatenate(dsts),
                      np.vstack(efs), np.concatenate(gids), len(xs))


def _head_dot(z, vec, heads, ch):
    # (rows, heads*ch) . (heads*ch,) per head -> (rows, heads)
    return sum_(reshape(mul(z, vec), (z.shape[0], heads, ch)), axis=2)


def segment_softmax(scores, segments, num_segments):
    """Softmax of ``scores`` (E, H) within groups of rows sharing a segment id."""
    s = scores.data
    top = np.full((num_segments, s.shape[1]), -np.inf)
    np.maximum.at(top, segments, s)
    # shifting by a per-group constant leaves the softmax unchanged
    e = exp(sub(scores, top[segments]))
    return e / take(segment_sum(e, segments, num_segments), segments)


class GATLayer(Module):
    def __init__(self, d_in, heads, ch, edge_dim, rng):
        self.d_in, self.heads, self.ch, self.edge_dim = d_in, heads, ch, edge_dim
        hc = heads * ch
        self.W = param(kaiming_uniform(rng, (d_in, hc), d_in))
        self.U = param(kaiming_uniform(rng, (edge_dim, hc), max(edge_dim, 1)))
        self.a_dst = param(kaiming_uniform(rng, (hc,), 3 * ch))
        self.a_src = param(kaiming_uniform(rng, (hc,), 3 * ch))
        self.a_edge = param(kaiming_uniform(rng, (hc,), 3 * ch))
        self.bias = param(np.zeros(hc))

    @property
    def d_out(self):
        return self.heads * self.ch

    def attention(self, h, batch):
        """Return (Wh, alpha) with alpha of shape (E, heads)."""
        h = as_tensor(h)
        if h.ndim != 2 or h.shape[1] != self.d_in:
            raise ShapeError(f"GAT layer expects (N, {self.d_in}) features, got {h.shape}")
        n = h.shape[0]
        if not np.all(np.bincount(batch.dst, minlength=n) > 0):
            raise ValueError("node without incident edges; add self-loops first")
        wh = matmul(h, self.W)
        s_dst = _head_dot(wh, self.a_dst, self.heads, self.ch)
        s_src = _head_dot(wh, self.a_src, self.heads, self.ch)
        s_edge = _head_dot(matmul(Tensor(batch.edge_feats), self.U), self.a_edge, self.heads, self.ch)
        scores = leaky_relu(take(s_dst, batch.dst) + take(s_src, batch.src) + s_edge, LEAKY_SLOPE)
        return wh, segment_softmax(scores, batch.dst, n)

    def forward(self, h, batch):
        wh, alpha = self.attention(h, batch)
        e = len(batch.src)
        msg = mul(reshape(take(wh, batch.src), (e, self.heads, self.ch)), reshape(alpha, (e, self.heads, 1)))
        out = segment_sum(reshape(msg, (e, self.heads * self.ch)), batch.dst, wh.shape[0])
        return out + self.bias


def gat_layer_param_count(d_in, heads, ch, edge_dim):
    """heads * (F'F + F'Fe + 3F' + F') for one layer."""
    return heads * (ch * d_in + ch * edge_dim + 3 * ch + ch)


class GATEncoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        dims = [cfg.node_dim]
        self.layers = []
        for heads, ch in zip(cfg.heads, cfg.channels):
            self.layers.append(GATLayer(dims[-1], heads, ch, cfg.edge_dim, rng))
            dims.append(heads * ch)

    @property
    def d_out(self):
        return self.cfg.d_out

    def node_embeddings(self, batch):
        h = Tensor(batch.x)
        for i, layer in enumerate(self.layers):
            h = layer(h, batch)
            if i < len(self.layers) - 1:
                h = elu(h)
        return h

    def forward(self, batch):
        if not isinstance(batch, GraphBatch):
            batch = collate(batch if isinstance(batch, (list, tuple)) else [batch])
        if batch.num_nodes == 0:
            raise ValueError("graph batch has no nodes")
        h = self.node_embeddings(batch)
        pool = {"mean": segment_mean, "max": segment_max, "sum": segment_sum}[self.cfg.pooling]
        return pool(h, batch.graph_id, batch.num_graphs)


def graph_encode(features, cfg, weights):
    model = GATEncoder(cfg, np.random.default_rng(0))
    model.load_state_dict(weights)
    return model(features)
