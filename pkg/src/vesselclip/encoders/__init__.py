"""Tabular MLP, projectors, GAT graph encoder and residual CNN image encoder."""
from .checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from .cnn import CNNEncoder, CnnConfig, cnn_encode, resnet50_config
from .gat import GATEncoder, GATLayer, GatConfig, GraphBatch, collate, gat_layer_param_count, graph_encode, segment_softmax
from .mlp import MLP, MlpConfig, mlp_encode, projector, tabular_encoder
from .module import Linear, Module, count_params, kaiming_uniform


def pipeline_param_counts(tab_dim, gat_cfg=None, cnn_cfg=None, rng=None):
    """Trainable parameters of the graph and image pretraining pipelines.

    Each pipeline is its imaging encoder plus the tabular encoder and both
    projectors.  Returns a dict of per-part and total counts.
    """
    import numpy as np

    rng = rng or np.random.default_rng(0)
    gat = GATEncoder(gat_cfg or GatConfig(), rng)
    cnn = CNNEncoder(cnn_cfg or resnet50_config(), rng, lazy=True)
    tab = tabular_encoder(tab_dim, rng)
    parts = {
        "gat": count_params(gat),
        "cnn": count_params(cnn),
        "tabular": count_params(tab),
        "proj_tabular": count_params(projector(tab.d_out, rng)),
        "proj_graph": count_params(projector(gat.d_out, rng)),
        "proj_image": count_params(projector(cnn.d_out, rng)),
    }
    parts["graph_pipeline"] = parts["gat"] + parts["tabular"] + parts["proj_tabular"] + parts["proj_graph"]
    parts["image_pipeline"] = parts["cnn"] + parts["tabular"] + parts["proj_tabular"] + parts["proj_image"]
    return parts
