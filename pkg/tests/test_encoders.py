import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselclip import numcore as nc
from vesselclip.encoders import (
    MLP,
    CheckpointError,
    CNNEncoder,
    CnnConfig,
    GATEncoder,
    GATLayer,
    GatConfig,
    Module,
    MlpConfig,
    collate,
    count_params,
    dumps,
    graph_encode,
    load_checkpoint,
    loads,
    mlp_encode,
    pipeline_param_counts,
    resnet50_config,
    save_checkpoint,
    tabular_encoder,
)
from vesselclip.encoders.cnn import BasicBlock, Bottleneck
from vesselclip.vesselgraph import GraphFeatures, extract_graph, normalize_graph, phantoms


def random_graph(rng, n=None, edge_dim=4, node_dim=3):
    n = n or int(rng.integers(1, 7))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.5]
    src = [u for u, v in pairs] + [v for u, v in pairs]
    dst = [v for u, v in pairs] + [u for u, v in pairs]
    ef = rng.normal(size=(len(pairs), edge_dim))
    return GraphFeatures(rng.normal(size=(n, node_dim)), np.array([src, dst], dtype=np.int64).reshape(2, -1),
                         np.vstack([ef, ef]) if pairs else np.zeros((0, edge_dim)))


def weighted(out, w):
    return nc.sum_(nc.mul(out, w))


def small_gat_cfg():
    return GatConfig(heads=(2, 2), channels=(3, 2))


# -- parameter counts ----------------------------------------------------------

def test_default_gat_count_closed_form():
    # hand-evaluated: layer dims 3 -> 40 -> 200 -> 512, edge dim 4
    l1 = 4 * (10 * 3 + 10 * 4 + 3 * 10 + 10)
    l2 = 4 * (50 * 40 + 50 * 4 + 3 * 50 + 50)
    l3 = 2 * (256 * 200 + 256 * 4 + 3 * 256 + 256)
    assert (l1, l2, l3) == (440, 9600, 106496)
    model = GATEncoder(GatConfig(), np.random.default_rng(0))
    assert count_params(model) == l1 + l2 + l3 == 116536


def test_mlp_count_and_output_dim():
    d = 83
    enc = tabular_encoder(d, np.random.default_rng(0))
    assert count_params(enc) == d * 1024 + 1024 + 1024 * 1024 + 1024
    assert enc(np.zeros((2, d))).shape == (2, 1024)


def test_empty_model_has_no_params():
    assert count_params(Module()) == 0


def test_pipeline_ratio():
    parts = pipeline_param_counts(83)
    assert parts["graph_pipeline"] < 0.15 * parts["image_pipeline"]
    # ResNet50 without batch norm: torchvision's 23.5M conv/fc weights less its BN, plus conv biases
    assert 23e6 < parts["cnn"] < 26e6


def test_desk_cnn_larger_than_gat():
    rng = np.random.default_rng(0)
    assert count_params(CNNEncoder(CnnConfig(), rng)) > count_params(GATEncoder(GatConfig(), rng))


def test_resnet50_preset_runs_forward_shape():
    cfg = resnet50_config(in_channels=3, d_out=16)
    cfg.image_size = 32
    model = CNNEncoder(cfg, np.random.default_rng(0), lazy=True)
    assert model(np.zeros((1, 3, 32, 32))).shape == (1, 16)


# -- MLP ---------------------------------------------------------------------------

def test_zero_weights_return_bias():
    cfg = MlpConfig(4, (5,), 3)
    model = MLP(cfg, np.random.default_rng(0))
    state = {k: np.zeros_like(v) for k, v in model.state_dict().items()}
    state["layers.1.bias"] = np.array([1.0, -2.0, 0.5])
    out = mlp_encode(np.random.default_rng(1).normal(size=(6, 4)), cfg, state)
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0, 0.5], (6, 1)))


def test_mlp_dim_mismatch():
    with pytest.raises(nc.ShapeError):
        MLP(MlpConfig(4, (5,), 3), np.random.default_rng(0))(np.zeros((2, 5)))


@pytest.mark.parametrize("seed", range(5))
def test_mlp_grad_check(seed):
    rng = np.random.default_rng(seed)
    model = MLP(MlpConfig(4, (6, 5), 3), rng)
    x = nc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 3))
    rep = nc.grad_check(lambda *_: weighted(model(x), w), [x] + model.parameters())
    assert rep.passed, rep


# -- GAT ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_gat_layer_grad_check(seed):
    rng = np.random.default_rng(seed)
    batch = collate([random_graph(rng, n=4), random_graph(rng, n=3)])
    layer = GATLayer(3, 2, 3, 4, rng)
    h = nc.Tensor(batch.x, requires_grad=True)
    w = rng.normal(size=(batch.num_nodes, 6))
    rep = nc.grad_check(lambda *_: weighted(layer(h, batch), w), [h] + layer.parameters())
    assert rep.passed, rep


@pytest.mark.parametrize("pooling", ["mean", "max", "sum"])
@pytest.mark.parametrize("seed", range(5))
def test_gat_encoder_grad_check(seed, pooling):
    rng = np.random.default_rng(seed)
    cfg = small_gat_cfg()
    cfg.pooling = pooling
    model = GATEncoder(cfg, rng)
    batch = collate([random_graph(rng, n=4), random_graph(rng, n=2)])
    w = rng.normal(size=(2, cfg.d_out))
    rep = nc.grad_check(lambda *_: weighted(model(batch), w), model.parameters())
    assert rep.passed, rep


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    batch = collate([random_graph(rng) for _ in range(3)])
    layer = GATLayer(3, 4, 5, 4, rng)
    _, alpha = layer.attention(nc.Tensor(batch.x), batch)
    sums = np.zeros((batch.num_nodes, 4))
    np.add.at(sums, batch.dst, alpha.data)
    assert np.abs(sums - 1).max() < 1e-12


def test_single_node_self_loop():
    rng = np.random.default_rng(0)
    layer = GATLayer(3, 4, 5, 4, rng)
    g = GraphFeatures(np.array([[0.2, -0.4, 0.5]]), np.zeros((2, 0), dtype=np.int64), np.zeros((0, 4)))
    out = layer(nc.Tensor(g.node_feats), collate([g]))
    np.testing.assert_allclose(out.data, g.node_feats @ layer.W.data + layer.bias.data, atol=1e-15)


def test_single_node_graph_embedding_equals_node_output():
    rng = np.random.default_rng(1)
    model = GATEncoder(GatConfig(), rng)
    g = GraphFeatures(np.array([[0.3, 0.1, 0.0]]), np.zeros((2, 0), dtype=np.int64), np.zeros((0, 4)))
    batch = collate([g])
    np.testing.assert_array_equal(model(batch).data, model.node_embeddings(batch).data)
    assert model(batch).shape == (1, 512)


def test_symmetric_nodes_identical_outputs():
    rng = np.random.default_rng(2)
    x = np.array([[0.5, 0.5, 0.25], [0.1, 0.5, 0.25], [0.9, 0.5, 0.25]])
    x[2] = x[1]
    ef = np.ones((2, 4))
    g = GraphFeatures(x, np.array([[0, 1, 0, 2], [1, 0, 2, 0]]), np.vstack([ef, ef]))
    h = GATEncoder(small_gat_cfg(), rng).node_embeddings(collate([g])).data
    np.testing.assert_array_equal(h[1], h[2])


def permute_graph(g, perm, edge_perm):
    inv = np.argsort(perm)
    ei = inv[g.edge_index][:, edge_perm]
    return GraphFeatures(g.node_feats[perm], ei, g.edge_feats[edge_perm])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance_and_invariance(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n=int(rng.integers(2, 8)))
    perm = rng.permutation(g.node_feats.shape[0])
    q = permute_graph(g, perm, rng.permutation(g.edge_index.shape[1]))
    model = GATEncoder(small_gat_cfg(), rng)
    h_g = model.node_embeddings(collate([g])).data
    h_q = model.node_embeddings(collate([q])).data
    np.testing.assert_allclose(h_q, h_g[perm], atol=1e-12)
    np.testing.assert_allclose(model(collate([q])).data, model(collate([g])).data, atol=1e-12)


def test_batching_matches_individual():
    rng = np.random.default_rng(3)
    graphs = [random_graph(rng) for _ in range(4)]
    model = GATEncoder(small_gat_cfg(), rng)
    together = model(collate(graphs)).data
    apart = np.vstack([model(collate([g])).data for g in graphs])
    np.testing.assert_allclose(together, apart, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_edge_scaling_stays_finite(seed, scale):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    g.edge_feats = g.edge_feats * scale
    assert np.isfinite(GATEncoder(GatConfig(), rng)(collate([g])).data).all()


def test_real_graph_embedding():
    f = normalize_graph(extract_graph(phantoms.star(4)))
    w = GATEncoder(GatConfig(), np.random.default_rng(4)).state_dict()
    assert graph_encode([f], GatConfig(), w).shape == (1, 512)


def test_no_self_loop_rejected():
    rng = np.random.default_rng(0)
    layer = GATLayer(3, 1, 2, 4, rng)
    batch = collate([random_graph(rng, n=2)])
    batch.src, batch.dst, batch.edge_feats = batch.src[:0], batch.dst[:0], batch.edge_feats[:0]
    with pytest.raises(ValueError):
        layer(nc.Tensor(batch.x), batch)


# -- CNN ---------------------------------------------------------------------------

def tiny_cnn_cfg(in_channels=2):
    return CnnConfig(in_channels=in_channels, stem_channels=3, stem_stride=1, stem_pool=2,
                     stages=((1, 3, 1), (1, 4, 2)), d_out=3, image_size=8)


@pytest.mark.parametrize("seed", range(5))
def test_basic_block_grad_check(seed):
    rng = np.random.default_rng(seed)
    block = BasicBlock(2, 3, 2, rng)
    x = nc.Tensor(rng.normal(size=(2, 6, 6, 2)), requires_grad=True)
    w = rng.normal(size=(2, 3, 3, 3))
    rep = nc.grad_check(lambda *_: weighted(block(x), w), [x] + block.parameters())
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_bottleneck_grad_check(seed):
    rng = np.random.default_rng(seed)
    block = Bottleneck(3, 2, 1, rng, expansion=2)
    x = nc.Tensor(rng.normal(size=(1, 5, 5, 3)), requires_grad=True)
    w = rng.normal(size=(1, 5, 5, 4))
    rep = nc.grad_check(lambda *_: weighted(block(x), w), [x] + block.parameters())
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_cnn_grad_check(seed):
    rng = np.random.default_rng(seed)
    model = CNNEncoder(tiny_cnn_cfg(), rng)
    x = rng.random((2, 2, 8, 8))
    w = rng.normal(size=(2, 3))
    rep = nc.grad_check(lambda *_: weighted(model(x), w), model.parameters())
    assert rep.passed, rep


def test_cnn_shape_contract_and_determinism():
    x = np.random.default_rng(0).random((2, 1, 128, 128))
    a = CNNEncoder(CnnConfig(), np.random.default_rng(7))(x).data
    b = CNNEncoder(CnnConfig(), np.random.default_rng(7))(x).data
    assert a.shape == (2, 512)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(nc.ShapeError):
        CNNEncoder(CnnConfig(), np.random.default_rng(7))(np.zeros((1, 1, 64, 64)))


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    model = GATEncoder(small_gat_cfg(), rng)
    state = model.state_dict()
    state["weird"] = np.array([np.pi, -0.0, 5e-324, 1.7976931348623157e308])
    header = {"format": "test", "rng": rng.bit_generator.state}
    save_checkpoint(tmp_path / "c.bin", header, state)
    h2, s2 = load_checkpoint(tmp_path / "c.bin")
    assert h2 == header
    assert set(s2) == set(state)
    for k in state:
        assert s2[k].tobytes() == np.ascontiguousarray(state[k], dtype="<f8").tobytes()
    clone = GATEncoder(small_gat_cfg(), np.random.default_rng(99)).load_state_dict(s2)
    assert dumps({}, clone.state_dict()) == dumps({}, model.state_dict())


def test_checkpoint_errors():
    blob = dumps({"a": 1}, {"w": np.ones((3, 2))})
    with pytest.raises(CheckpointError, match="truncated"):
        loads(blob[:-5])
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        loads(blob + b"\0")


def test_load_state_dict_shape_mismatch():
    model = MLP(MlpConfig(4, (5,), 3), np.random.default_rng(0))
    state = model.state_dict()
    state["layers.0.weight"] = np.zeros((5, 5))
    with pytest.raises(ValueError):
        model.load_state_dict(state)
