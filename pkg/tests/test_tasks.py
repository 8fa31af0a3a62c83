import csv
import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from vesselclip import synthdata
from vesselclip import tasks as T


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auroc_examples():
    assert T.auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert T.auroc([0.4] * 6, [1, 0, 1, 0, 0, 0]) == 0.5
    assert T.auroc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75


@st.composite
def scored(draw, max_n=50):
    n = draw(st.integers(2, max_n))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)))
    scores = draw(st.lists(st.integers(0, 6).map(lambda k: k / 4), min_size=n, max_size=n))
    return np.array(scores, float), np.array(labels)


@settings(max_examples=200, deadline=None)
@given(scored())
def test_auroc_matches_pair_count_and_trapezoid(case):
    s, y = case
    a = T.auroc(s, y)
    assert abs(a - brute_auroc(s, y)) < 1e-12
    assert abs(T.trapezoid_area(T.roc_points(s, y)) - a) < 1e-12


@settings(max_examples=50, deadline=None)
@given(scored())
def test_roc_monotone_and_framed(case):
    pts = np.array(T.roc_points(*case))
    assert tuple(pts[0]) == (0.0, 0.0) and tuple(pts[-1]) == (1.0, 1.0)
    assert np.all(np.diff(pts, axis=0) >= 0)
    assert len(pts) == len(np.unique(case[0])) + 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_invariances(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    s = rng.normal(size=n)
    a = T.auroc(s, y)
    assert abs(T.auroc(np.exp(3 * s) + 2, y) - a) < 1e-12
    assert abs(T.auroc(-s, y) + a - 1) < 1e-12


def test_roc_perfect_and_reversed():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    y[:2] = [0, 1]
    assert (0.0, 1.0) in T.roc_points(y + 0.1 * rng.random(200), y)
    s = rng.normal(size=200)
    a = T.trapezoid_area(T.roc_points(s, y))
    assert abs(T.trapezoid_area(T.roc_points(-s, y)) - (1 - a)) < 1e-12
    assert abs(a - T.auroc(s, y)) < 1e-12


def test_single_class_rejected():
    with pytest.raises(ValueError):
        T.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        T.roc_points([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        T.auroc([0.1, np.nan], [0, 1])


# -- splits ------------------------------------------------------------------------------

def test_balanced_rule_on_hundred_subjects():
    labels = np.zeros(100, int)
    labels[::10] = 1
    bal = T.balanced_subset(labels, np.arange(100), np.random.default_rng(0))
    assert labels[bal].sum() == 10 and (labels[bal] == 0).sum() == 10
    assert len(np.unique(bal)) == 20


@settings(max_examples=30, deadline=None)
@given(st.integers(60, 400), st.integers(0, 1000), st.floats(0.05, 0.35))
def test_split_partition_and_stratification(n, seed, prev):
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < prev).astype(int)
    labels[:8] = [1, 1, 1, 1, 0, 0, 0, 0]
    assume(2 * labels.sum() < n - 10)  # positives are the minority class
    s = T.make_balanced_split(labels, seed=seed)
    parts = [s.test, s.train, s.val]
    assert sum(map(len, parts)) == n
    assert len(np.unique(np.concatenate(parts))) == n
    for c in (0, 1):
        k = (labels == c).sum()
        assert (labels[s.test] == c).sum() == round(0.2 * k)
    assert set(s.balanced) <= set(s.train) and set(s.balanced_val) <= set(s.val)
    assert (labels[s.balanced] == 1).sum() == (labels[s.balanced] == 0).sum() == (labels[s.train] == 1).sum()
    again = T.make_balanced_split(labels, seed=seed)
    for a, b in zip(parts + [s.balanced], [again.test, again.train, again.val, again.balanced]):
        np.testing.assert_array_equal(a, b)


def test_split_options_and_errors():
    labels = np.r_[np.ones(50, int), np.zeros(450, int)]
    s = T.make_balanced_split(labels, seed=1, neg_ratio=2.0, max_labels=60)
    y = labels[s.balanced]
    assert y.sum() == 20 and (y == 0).sum() == 40
    with pytest.raises(ValueError):
        T.make_balanced_split(np.zeros(100, int))
    with pytest.raises(ValueError):
        T.make_balanced_split(np.r_[1, np.zeros(99, int)])
    with pytest.raises(T.SplitLeakError):
        s.guard(np.r_[s.train[:3], s.test[:1]])
    s.guard(s.train)
    assignment = s.assignment(len(labels))
    back = T.CohortSplit.from_assignment(assignment, labels, seed=1, neg_ratio=2.0, max_labels=60)
    np.testing.assert_array_equal(back.test, s.test)


# -- fine-tuning -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cohort():
    return synthdata.gen_cohort(400, seed=5, graphs=True)


def quick(**kw):
    kw.setdefault("max_epochs", 4)
    kw.setdefault("patience", 2)
    return T.FinetuneConfig(**kw)


def test_tabular_nn_report_and_determinism(cohort):
    data = cohort.to_data()
    a = T.finetune(data, "tabular-nn", quick(seed=3))
    b = T.finetune(cohort.to_data(), "tabular-nn", quick(seed=3))
    assert a.report == b.report
    r = a.report
    assert 0 <= r.auroc <= 1 and r.method == "tabular-nn"
    assert r.n_pos + r.n_neg == (cohort.split == "test").sum()
    assert T.finetune(data, "tabular-nn", quick(seed=4)).report.config_hash != r.config_hash


def test_split_guard_stops_leaky_run(cohort, monkeypatch):
    real = T.CohortSplit.from_assignment

    def leaky(*a, **k):
        s = real(*a, **k)
        s.balanced = np.r_[s.balanced, s.test[:1]]
        return s

    monkeypatch.setattr(T.CohortSplit, "from_assignment", leaky)
    with pytest.raises(T.SplitLeakError):
        T.finetune(cohort.to_data(), "tabular-nn", quick())


def test_contract_errors(cohort, tmp_path):
    data = cohort.to_data()
    with pytest.raises(ValueError):
        T.finetune(data, "cl-graph", quick())  # no checkpoint, not from scratch
    with pytest.raises(ValueError):
        T.finetune(data, "imaging-nn", quick())
    bare = T.CohortData(data.rows, data.schema, data.labels, data.assignment)
    with pytest.raises(ValueError):
        T.finetune(bare, "cl-graph", quick(from_scratch=True))


def test_cl_graph_from_checkpoint_and_reload(cohort, tmp_path):
    from dataclasses import asdict

    from vesselclip.contrastive import Architecture, ContrastiveConfig, PairedData, pretrain
    from vesselclip.encoders import GatConfig

    data = cohort.to_data()
    x, feats = data.tabular(), data.graph_features()
    fit = data.fit_rows
    arch = Architecture("graph", x.shape[1], tab_hidden=32, tab_out=16, proj_hidden=16, proj_out=8,
                        gat=asdict(GatConfig(heads=(2, 2), channels=(4, 8))))
    tr = pretrain(PairedData(x[fit], "graph", graphs=[feats[i] for i in fit]), arch,
                  ContrastiveConfig(epochs=1, batch_size=32))
    ck = tmp_path / "pre.bin"
    tr.save(ck)
    res = T.finetune(data, "cl-graph", quick(), checkpoint=ck)
    T.save_finetuned(tmp_path / "ft.bin", res)
    model, header = T.load_finetuned(tmp_path / "ft.bin")
    split = T.CohortSplit.from_assignment(data.assignment, data.labels)
    np.testing.assert_array_equal(T.predict(model, data, split.test), T.predict(res.model, data, split.test))
    assert header["config_hash"] == res.report.config_hash

    prob_arch = Architecture("prob", x.shape[1])
    with pytest.raises(ValueError):
        T.build_classifier("cl-raw", x.shape[1], quick(), checkpoint=ck)
    assert prob_arch.modality == "prob"


@pytest.mark.parametrize("method", ["multimodal-nn", "cl-raw", "cl-prob"])
def test_image_methods_run(method):
    c = synthdata.gen_cohort(60, seed=2, prevalence=0.3)
    kw = {"from_scratch": True} if method.startswith("cl-") else {}
    res = T.finetune(c.to_data(), method, quick(max_epochs=1, **kw))
    assert 0 <= res.report.auroc <= 1


def test_permuted_labels_keep_class_counts(cohort):
    res = T.finetune(cohort.to_data(), "tabular-nn", quick(permute_labels=True))
    assert res.report.n_pos == int(cohort.labels[cohort.split == "test"].sum())


def test_eval_report_files(tmp_path):
    r = T.EvalReport("cl-graph", 0.75, 2, 2, 0, "abc", [[0.0, 0.0], [0.5, 1.0], [1.0, 1.0]])
    r.save(tmp_path / "r.json", roc_csv=tmp_path / "r.csv")
    assert T.EvalReport.from_json((tmp_path / "r.json").read_text()) == r
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["fpr", "tpr"] and [list(map(float, x)) for x in rows[1:]] == r.roc


def test_report_order_and_deltas():
    mk = lambda m, a, s=0: T.EvalReport(m, a, 1, 1, s, "h", [])
    reports = [mk("cl-graph", 0.7192), mk("cl-raw", 0.7154), mk("tabular-nn", 0.7002),
               mk("multimodal-nn", 0.6930), mk("cl-prob", 0.7173), mk("tabular-nn", 0.7002, 1)]
    text, rows = T.format_report(reports)
    assert [r[0] for r in rows[1:]] == ["tabular-nn", "multimodal-nn", "cl-raw", "cl-prob", "cl-graph"]
    graph = rows[-1]
    assert graph[4] == "+0.0190" and graph[5] == "+2.71%"
    assert "deltas relative to tabular-nn" in text
    text, rows = T.format_report([mk("cl-graph", 0.7192), mk("multimodal-nn", 0.6930)])
    assert rows[-1][5] == "+3.78%" and rows[-1][4] == "+0.0262"
