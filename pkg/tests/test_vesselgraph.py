import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from vesselclip import imageio
from vesselclip.vesselgraph import (
    DesyncError,
    Edge,
    EmptyGraphError,
    GraphFormatError,
    Node,
    NormStats,
    NotThinError,
    VesselGraph,
    check_graph,
    compute_edge_features,
    deserialize,
    distance_transform,
    extract_graph,
    extract_topology,
    features_or_placeholder,
    is_thin,
    normalize_graph,
    serialize,
    skeletonize,
)
from vesselclip.vesselgraph import phantoms

EIGHT = np.ones((3, 3), bool)


def reference_zhang_suen(mask):
    """Textbook parallel Zhang-Suen, used only as an oracle."""
    img = np.pad(mask, 1).astype(np.uint8)
    ring = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            p = [np.roll(img, (-dr, -dc), axis=(0, 1)) for dr, dc in ring]
            b = sum(p)
            a = sum(((p[k] == 0) & (p[(k + 1) % 8] == 1)).astype(int) for k in range(8))
            p2, _, p4, _, p6, _, p8, _ = p
            c = (img == 1) & (b >= 2) & (b <= 6) & (a == 1)
            if step == 0:
                c &= (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                c &= (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            if c.any():
                img[c] = 0
                changed = True
    return img[1:-1, 1:-1].astype(bool)


def brute_force_edt(mask):
    bg = np.argwhere(~np.pad(mask, 1)) - 1
    out = np.zeros(mask.shape)
    for r, c in np.argwhere(mask):
        out[r, c] = np.sqrt(((bg - (r, c)) ** 2).sum(axis=1).min())
    return out


def n_components(img):
    return ndimage.label(img, structure=EIGHT)[1]


def random_blob_mask(seed, size=40):
    rng = np.random.default_rng(seed)
    m = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 5)):
        p0 = rng.uniform(2, size - 2, 2)
        p1 = rng.uniform(2, size - 2, 2)
        phantoms.stroke(m, p0, p1, rng.uniform(0.5, 3.0))
    return m


# -- skeletonize ---------------------------------------------------------------

def test_bar_thins_to_horizontal_line():
    skel = skeletonize(phantoms.bar(width=3))
    rows = np.unique(np.argwhere(skel)[:, 0])
    assert len(rows) == 1 and skel.sum() > 30


def test_empty_mask():
    assert not skeletonize(np.zeros((10, 10), bool)).any()


def test_disk_collapses_like_reference():
    d = phantoms.disk(radius=20)
    ref = reference_zhang_suen(d)
    ours = skeletonize(d)
    assert ref.sum() <= 5
    assert ours.sum() <= 5
    np.testing.assert_array_equal(ours, ref)


def test_matches_reference_on_bar():
    m = phantoms.bar(width=5)
    np.testing.assert_array_equal(skeletonize(m), reference_zhang_suen(m))


def test_two_by_two_square_survives_as_one_pixel():
    m = np.zeros((6, 6), bool)
    m[2:4, 2:4] = True
    assert skeletonize(m).sum() == 1
    assert reference_zhang_suen(m).sum() == 0  # the defect our guard removes


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_skeleton_invariants(seed):
    m = random_blob_mask(seed)
    s = skeletonize(m)
    assert not (s & ~m).any()
    assert is_thin(s)
    assert n_components(s) == n_components(m)
    np.testing.assert_array_equal(skeletonize(s), s)


# -- topology ------------------------------------------------------------------

def degrees(g):
    return sorted(n.degree for n in g.nodes)


def test_line_topology():
    g = extract_topology(skeletonize(phantoms.line()))
    assert degrees(g) == [1, 1] and len(g.edges) == 1


def test_y_topology():
    g = extract_topology(skeletonize(phantoms.y_junction()))
    assert degrees(g) == [1, 1, 1, 3] and len(g.edges) == 3


def test_ring_topology():
    g = extract_topology(skeletonize(phantoms.ring()))
    assert degrees(g) == [2] and len(g.edges) == 1
    assert g.edges[0].is_loop
    anchor = g.nodes[0]
    pixels = [tuple(p) for p in np.argwhere(skeletonize(phantoms.ring()))[:, ::-1]]
    assert (anchor.x, anchor.y) == min(pixels)


@pytest.mark.parametrize("k", [3, 4, 5])
@pytest.mark.parametrize("half_width", [0.5, 1.5])
def test_star_topology(k, half_width):
    g = extract_graph(phantoms.star(k, half_width=half_width))
    assert len(g.edges) == k
    assert degrees(g) == [1] * k + [k]


def test_rejects_unthinned():
    with pytest.raises(NotThinError):
        extract_topology(np.ones((4, 4), bool))


def test_short_spur_pruned():
    m = np.zeros((30, 40), bool)
    m[15, 5:35] = True
    m[13:15, 20] = True  # 2-pixel spur
    g = extract_graph(m, prune=3)
    assert degrees(g) == [1, 1] and len(g.edges) == 1
    g = extract_graph(m, prune=0)
    assert degrees(g) == [1, 1, 1, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6), st.integers(0, 6))
def test_padding_shifts_positions(seed, top, left):
    m = random_blob_mask(seed)
    g = extract_graph(m)
    padded = np.pad(m, ((top, 3), (left, 2)))
    h = extract_graph(padded)
    assert [(n.x + left, n.y + top, n.degree) for n in g.nodes] == [(n.x, n.y, n.degree) for n in h.nodes]
    assert [e.length for e in g.edges] == pytest.approx([e.length for e in h.edges], abs=1e-12)
    check_graph(g)
    assert sum(n.degree for n in g.nodes) == 2 * len(g.edges)


# -- edge features ---------------------------------------------------------------

def test_straight_edge_length_and_curveness():
    m = np.zeros((9, 120), bool)
    m[4, 10:111] = True
    g = extract_graph(m)
    (e,) = g.edges
    assert e.length == 100.0
    assert e.curveness == 1.0


def test_semicircle_curveness():
    g = extract_graph(phantoms.semicircle(radius=100))
    (e,) = g.edges
    assert abs(e.curveness - math.pi / 2) / (math.pi / 2) < 0.02


def test_width5_bar_radius_matches_brute_force():
    m = np.zeros((15, 60), bool)
    m[5:10, 5:55] = True
    g = extract_graph(m)
    (e,) = g.edges
    oracle = brute_force_edt(m)
    xs, ys = zip(*e.polyline)
    assert abs(e.mean_radius - oracle[list(ys), list(xs)].mean()) < 0.5
    assert abs(e.mean_radius - 3.0) < 0.5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_distance_transform_exact(seed):
    m = random_blob_mask(seed, size=24)
    np.testing.assert_allclose(distance_transform(m), brute_force_edt(m), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_edge_feature_invariants(seed):
    g = extract_graph(random_blob_mask(seed))
    for e in g.edges:
        assert e.length > 0
        assert e.mean_radius >= 0.5
        if not e.is_loop:
            assert e.curveness >= 1 - 1e-9


def test_desynchronised_mask_rejected():
    g = extract_topology(skeletonize(phantoms.line()))
    with pytest.raises(DesyncError):
        compute_edge_features(g, np.zeros((64, 64), bool))


# -- normalisation ---------------------------------------------------------------

def test_node_feature_scaling():
    g = VesselGraph(100, 60, [Node(50, 30, 2), Node(10, 30, 1), Node(90, 30, 1)],
                    [Edge(0, 1, ((50, 30), (10, 30)), 40.0, 1.0, 10.0, 1.0),
                     Edge(0, 2, ((50, 30), (90, 30)), 40.0, 1.0, 10.0, 1.0)])
    f = normalize_graph(g)
    np.testing.assert_allclose(f.node_feats[0], [0.5, 0.5, 0.5])
    assert np.all(f.edge_feats[:, 1] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_edge_index_count(seed):
    g = extract_graph(random_blob_mask(seed))
    if not g.nodes:
        return
    f = normalize_graph(g, NormStats.fit([g]))
    loops = sum(e.is_loop for e in g.edges)
    assert f.edge_index.shape[1] == 2 * (len(g.edges) - loops) + loops
    assert f.edge_feats.shape == (f.edge_index.shape[1], 4)


def test_empty_graph_error_and_placeholder():
    g = extract_graph(np.zeros((10, 10), bool))
    with pytest.raises(EmptyGraphError):
        normalize_graph(g)
    f = features_or_placeholder(g)
    assert f.node_feats.shape == (1, 3) and not f.node_feats.any()


# -- serialisation ----------------------------------------------------------------

def graphs_equal(a, b):
    assert (a.width, a.height) == (b.width, b.height)
    assert a.nodes == b.nodes
    assert len(a.edges) == len(b.edges)
    for x, y in zip(a.edges, b.edges):
        assert (x.u, x.v, x.polyline) == (y.u, y.v, y.polyline)
        for f in ("length", "curveness", "volume", "mean_radius"):
            assert math.isclose(getattr(x, f), getattr(y, f), rel_tol=5e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip(seed):
    g = extract_graph(random_blob_mask(seed))
    h = deserialize(serialize(g))
    graphs_equal(g, h)
    assert serialize(h) == serialize(g)


def test_field_order_and_precision():
    g = extract_graph(phantoms.y_junction())
    text = serialize(g).decode()
    assert text.startswith('{"width":64,"height":64,"nodes":[{"x":')
    assert '"u":' in text and text.index('"polyline"') < text.index('"length"') < text.index('"curveness"')
    assert text.index('"volume"') < text.index('"mean_radius"')


def test_empty_document():
    g = deserialize(b'{"width":5,"height":5,"nodes":[],"edges":[]}')
    assert g.nodes == [] and g.edges == []


def test_truncated_document():
    blob = serialize(extract_graph(phantoms.line()))
    with pytest.raises(GraphFormatError) as info:
        deserialize(blob[: len(blob) // 2])
    assert info.value.offset > 0


def test_mask_file_round_trip(tmp_path):
    m = phantoms.y_junction()
    for name in ("m.pgm", "m.png"):
        imageio.write_mask(tmp_path / name, m)
        np.testing.assert_array_equal(imageio.read_mask(tmp_path / name), m)
