import io
import json
import math
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselclip import numcore as nc
from vesselclip.contrastive import (
    Architecture,
    ContrastiveConfig,
    ContrastiveModel,
    PairedData,
    Pretrainer,
    clip_loss,
    load_encoders,
    pretrain,
)
from vesselclip.encoders import CnnConfig, GatConfig, dumps
from vesselclip.vesselgraph import GraphFeatures


def oracle_loss(zi, zt, tau, lam, mode):
    """Direct double loop over the printed sums."""
    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    b = len(zi)

    def direction(p, q):
        total = 0.0
        for x in range(b):
            num = math.exp(cos(p[x], q[x]) / tau)
            ys = [y for y in range(b) if mode == "standard" or y != x]
            den = sum(math.exp(cos(p[x], q[y]) / tau) for y in ys)
            total -= math.log(num / den)
        return total

    return lam * direction(zi, zt) + (1 - lam) * direction(zt, zi)


def test_two_orthonormal_pairs():
    e = np.eye(2)
    assert abs(clip_loss(e, e, tau=1.0, lam=0.5, mode="as-written").item() - (-2.0)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9), st.sampled_from(["as-written", "standard"]),
       st.floats(0.05, 2.0), st.floats(0.0, 1.0))
def test_matches_double_loop(seed, b, mode, tau, lam):
    rng = np.random.default_rng(seed)
    zi, zt = rng.normal(size=(b, 5)), rng.normal(size=(b, 5))
    got = clip_loss(zi, zt, tau, lam, mode).item()
    assert abs(got - oracle_loss(zi, zt, tau, lam, mode)) < 1e-9 * max(1.0, abs(got))


@pytest.mark.parametrize("mode", ["as-written", "standard"])
def test_lambda_and_swap_identities(mode):
    rng = np.random.default_rng(0)
    zi, zt = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    l_it = oracle_loss(zi, zt, 0.3, 1.0, mode)
    assert abs(clip_loss(zi, zt, 0.3, 1.0, mode).item() - l_it) < 1e-12
    for lam in (0.0, 0.3, 0.5, 0.9):
        a = clip_loss(zi, zt, 0.3, lam, mode).item()
        b = clip_loss(zt, zi, 0.3, 1 - lam, mode).item()
        assert abs(a - b) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["as-written", "standard"]))
def test_batch_order_and_row_scale_invariance(seed, mode):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 8))
    zi, zt = rng.normal(size=(b, 3)), rng.normal(size=(b, 3))
    base = clip_loss(zi, zt, 0.2, 0.4, mode).item()
    p = rng.permutation(b)
    assert abs(clip_loss(zi[p], zt[p], 0.2, 0.4, mode).item() - base) < 1e-9
    k = int(rng.integers(b))
    scaled = zi.copy()
    scaled[k] *= 3
    assert abs(clip_loss(scaled, zt, 0.2, 0.4, mode).item() - base) < 1e-9


def test_standard_mode_prefers_aligned_pairs():
    import itertools

    z = np.eye(4)[:, :4]
    aligned = clip_loss(z, z, 0.5, 0.5, "standard").item()
    for p in itertools.permutations(range(4)):
        if list(p) != list(range(4)):
            assert aligned < clip_loss(z, z[list(p)], 0.5, 0.5, "standard").item()


@pytest.mark.parametrize("mode", ["as-written", "standard"])
@pytest.mark.parametrize("b", [2, 4, 8])
def test_grad_check(b, mode):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        zi = nc.Tensor(rng.normal(size=(b, 3)), requires_grad=True)
        zt = nc.Tensor(rng.normal(size=(b, 3)), requires_grad=True)
        rep = nc.grad_check(lambda a, c: clip_loss(a, c, 0.5, 0.3, mode), [zi, zt])
        assert rep.passed, rep


def test_errors():
    with pytest.raises(ValueError):
        clip_loss(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        clip_loss(np.eye(2), np.eye(2), tau=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(lam=1.5)
    with pytest.raises(ValueError):
        ContrastiveConfig(mode="other")


def test_small_tau_stays_finite():
    rng = np.random.default_rng(0)
    assert np.isfinite(clip_loss(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), tau=1e-4).item())


# -- pretraining -------------------------------------------------------------------

def correlated_graph_data(n, seed=0, d_tab=6):
    """Star-ish graphs whose node features shift with a latent also visible in the table."""
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(n, 2))
    graphs = []
    for i in range(n):
        k = int(rng.integers(2, 5))
        x = np.column_stack([np.full(k + 1, latent[i, 0]), rng.normal(0, 0.1, k + 1), np.full(k + 1, latent[i, 1])])
        src = np.r_[np.zeros(k), np.arange(1, k + 1)].astype(np.int64)
        dst = np.r_[np.arange(1, k + 1), np.zeros(k)].astype(np.int64)
        ef = np.tile(latent[i, [0, 1, 0, 1]], (2 * k, 1))
        graphs.append(GraphFeatures(x, np.vstack([src, dst]), ef))
    tab = np.column_stack([latent, rng.normal(size=(n, d_tab - 2))]) + rng.normal(0, 0.1, (n, d_tab))
    return PairedData(tab, "graph", graphs=graphs)


def small_arch(modality="graph", d_tab=6, **kw):
    return Architecture(modality, d_tab, tab_hidden=16, tab_out=8, proj_hidden=8, proj_out=4,
                        gat=asdict(GatConfig(heads=(2, 2), channels=(4, 4))), **kw)


def test_loss_decreases():
    data = correlated_graph_data(512)
    cfg = ContrastiveConfig(batch_size=64, epochs=1000, lr=3e-3, seed=3)
    tr = Pretrainer(ContrastiveModel(small_arch(), 3), data, cfg)
    first = tr.step()
    later = [tr.step() for _ in range(99)]
    assert np.mean(later[-20:]) < first


def test_same_seed_identical_checkpoints():
    data = correlated_graph_data(96)
    cfg = ContrastiveConfig(batch_size=32, epochs=2, seed=5)
    a = pretrain(data, small_arch(), cfg)
    b = pretrain(data, small_arch(), cfg)
    assert dumps(*a.state()) == dumps(*b.state())
    assert [h["epoch"] for h in a.history] == [0, 1]


@pytest.mark.parametrize("split_at", [2, 3, 5])
def test_resume_matches_uninterrupted(tmp_path, split_at):
    data = correlated_graph_data(100)
    cfg = ContrastiveConfig(batch_size=32, epochs=10, seed=1)
    straight = Pretrainer(ContrastiveModel(small_arch(), 1), data, cfg)
    for _ in range(split_at + 1):
        straight.step()
    first = Pretrainer(ContrastiveModel(small_arch(), 1), data, cfg)
    for _ in range(split_at):
        first.step()
    first.save(tmp_path / "ck.bin")
    resumed = Pretrainer.load(tmp_path / "ck.bin", data)
    resumed.step()
    assert dumps(*resumed.state()) == dumps(*straight.state())


def test_partial_batch_dropped_and_log_lines():
    data = correlated_graph_data(70)
    buf = io.StringIO()
    tr = Pretrainer(ContrastiveModel(small_arch(), 0), data, ContrastiveConfig(batch_size=32, epochs=2))
    tr.run(log_file=buf)
    assert tr.step_count == 4  # 70 // 32 = 2 batches per epoch
    lines = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert [set(l) for l in lines] == [{"epoch", "mean_loss", "wall_seconds"}] * 2


def test_image_modality_with_augmentation(tmp_path):
    rng = np.random.default_rng(0)
    n = 24
    imgs = rng.random((n, 1, 16, 16))
    tab = imgs.reshape(n, -1)[:, :5]
    cnn = asdict(CnnConfig(in_channels=1, stem_channels=2, stages=((1, 2, 1),), d_out=4, image_size=16))
    arch = small_arch("prob", d_tab=5, cnn=cnn)
    cfg = ContrastiveConfig(batch_size=8, epochs=1, seed=2)
    tr = pretrain(PairedData(tab, "prob", images=imgs), arch, cfg)
    tr.save(tmp_path / "p.bin")
    arch2, f_i, f_t = load_encoders(tmp_path / "p.bin")
    assert arch2 == arch
    np.testing.assert_array_equal(f_i(imgs[:2]).data, tr.model.f_i(imgs[:2]).data)
    # lazily rendered images give the same run
    lazy = pretrain(PairedData(tab, "prob", images=lambda idx: imgs[idx]), arch, cfg)
    assert dumps(*lazy.state()) == dumps(*tr.state())


def test_empty_dataset_rejected():
    data = PairedData(np.zeros((0, 6)), "graph", graphs=[])
    with pytest.raises(ValueError):
        Pretrainer(ContrastiveModel(small_arch(), 0), data, ContrastiveConfig())
