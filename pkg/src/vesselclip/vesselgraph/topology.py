"""Trace a thinned skeleton into a vessel graph."""
from collections import deque

import numpy as np
from scipy import ndimage

from .graph import Edge, Node, VesselGraph
from .skeleton import RING, is_thin

EIGHT = np.ones((3, 3), dtype=bool)


class NotThinError(ValueError):
    pass


def arc_length(polyline):
    pts = np.asarray(polyline, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1)).sum())


def _neighbours(img, r, c):
    # img is zero-padded by one pixel; (r, c) are padded coordinates
    return [(r + dr, c + dc) for dr, dc in RING if img[r + dr, c + dc]]


def _cluster_path(cluster, start, goal):
    if start == goal:
        return [start]
    prev = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for dr, dc in RING:
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt in cluster and nxt not in prev:
                prev[nxt] = cur
                if nxt == goal:
                    path = [goal]
                    while prev[path[-1]] is not None:
                        path.append(prev[path[-1]])
                    return path[::-1]
                queue.append(nxt)
    raise RuntimeError("junction cluster is not 8-connected")


def _representative(pixels):
    cy = sum(p[0] for p in pixels) / len(pixels)
    cx = sum(p[1] for p in pixels) / len(pixels)
    return min(pixels, key=lambda p: ((p[0] - cy) ** 2 + (p[1] - cx) ** 2, p[1], p[0]))


def extract_topology(skel, prune=3.0):
    """Nodes at end/branch pixels, edges traced between them, rings anchored.

    Adjacent branch pixels form one junction node placed at the cluster
    pixel nearest the cluster centroid.  Spurs (an end node hanging off a
    branch node) with arc length below ``prune`` are removed, and nodes left
    with degree 2 are dissolved into a single edge.
    """
    skel = np.asarray(skel, dtype=bool)
    if not is_thin(skel):
        raise NotThinError("skeleton contains a 2x2 block; run skeletonize first")
    h, w = skel.shape
    img = np.pad(skel, 1)
    count = ndimage.convolve(img.astype(np.int32), EIGHT.astype(np.int32), mode="constant") - img
    count = np.where(img, count, 0)

    node_map = np.full(img.shape, -1, dtype=np.int64)
    clusters = []  # list of (pixel set, representative)
    junctions, n_j = ndimage.label(img & (count >= 3), structure=EIGHT)
    tips = np.argwhere(img & (count <= 1))
    groups = [[] for _ in range(n_j)]
    for r, c in np.argwhere(junctions > 0):
        groups[junctions[r, c] - 1].append((int(r), int(c)))
    groups.extend([[(int(r), int(c))] for r, c in tips])
    for pixels in groups:
        idx = len(clusters)
        clusters.append((set(pixels), _representative(pixels)))
        for p in pixels:
            node_map[p] = idx

    visited = np.zeros(img.shape, dtype=bool)
    raw_edges = []  # (u, v, pixel path)
    direct_seen = set()

    for u, (pixels, rep) in enumerate(clusters):
        for q in sorted(pixels):
            for p in _neighbours(img, *q):
                owner = node_map[p]
                if owner == u:
                    continue
                if owner >= 0:
                    key = frozenset((q, p))
                    if key in direct_seen:
                        continue
                    direct_seen.add(key)
                    path = [q, p]
                elif visited[p]:
                    continue
                else:
                    path = [q, p]
                    visited[p] = True
                    prev, cur = q, p
                    while True:
                        nxt = [n for n in _neighbours(img, *cur) if n != prev]
                        if len(nxt) != 1:
                            raise RuntimeError(f"unexpected branching while tracing at {cur}")
                        nxt = nxt[0]
                        path.append(nxt)
                        if node_map[nxt] >= 0:
                            break
                        if visited[nxt]:
                            raise RuntimeError(f"trace revisited pixel {nxt}")
                        visited[nxt] = True
                        prev, cur = cur, nxt
                    owner = node_map[path[-1]]
                v_pixels, v_rep = clusters[owner]
                full = (_cluster_path(pixels, rep, q)[:-1] + path[:-1]
                        + _cluster_path(v_pixels, path[-1], v_rep))
                raw_edges.append((u, int(owner), full))

    # Rings: components with no end or branch pixel.
    rest = img & (node_map < 0) & ~visited
    if rest.any():
        comps, n_c = ndimage.label(rest, structure=EIGHT)
        anchors = []
        for k in range(1, n_c + 1):
            pix = np.argwhere(comps == k)
            r, c = min(((int(r), int(c)) for r, c in pix), key=lambda p: (p[1], p[0]))
            anchors.append((r, c))
        for anchor in sorted(anchors, key=lambda p: (p[1], p[0])):
            idx = len(clusters)
            clusters.append(({anchor}, anchor))
            node_map[anchor] = idx
            path = [anchor]
            prev, cur = None, anchor
            while True:
                nbrs = _neighbours(img, *cur)
                nxt = nbrs[0] if prev is None else next(n for n in nbrs if n != prev)
                path.append(nxt)
                if nxt == anchor:
                    break
                prev, cur = cur, nxt
            raw_edges.append((idx, idx, path))

    nodes = [Node(x=rep[1] - 1, y=rep[0] - 1) for _, rep in clusters]
    edges = [Edge(u, v, tuple((c - 1, r - 1) for r, c in path)) for u, v, path in raw_edges]
    g = VesselGraph(width=w, height=h, nodes=nodes, edges=edges)
    g.recompute_degrees()
    if prune > 0:
        _prune_spurs(g, prune)
    _dissolve_degree_two(g)
    return _canonical(g)


def _prune_spurs(g, prune):
    alive = [True] * len(g.edges)
    node_alive = [True] * len(g.nodes)
    for i, e in enumerate(g.edges):
        if e.is_loop:
            continue
        du, dv = g.nodes[e.u].degree, g.nodes[e.v].degree
        if min(du, dv) == 1 and max(du, dv) >= 3 and arc_length(e.polyline) < prune:
            tip, hub = (e.u, e.v) if du == 1 else (e.v, e.u)
            alive[i] = False
            node_alive[tip] = False
            g.nodes[tip].degree = 0
            g.nodes[hub].degree -= 1
    _compact(g, alive, node_alive)


def _dissolve_degree_two(g):
    while True:
        incident = [[] for _ in g.nodes]
        for i, e in enumerate(g.edges):
            incident[e.u].append(i)
            if not e.is_loop:
                incident[e.v].append(i)
        target = next((n for n, inc in enumerate(incident)
                       if len(inc) == 2 and not any(g.edges[i].is_loop for i in inc)), None)
        if target is None:
            return
        i, j = incident[target]
        a, b = g.edges[i], g.edges[j]
        first = a.polyline if a.v == target else a.polyline[::-1]
        second = b.polyline if b.u == target else b.polyline[::-1]
        start = a.u if a.v == target else a.v
        end = b.v if b.u == target else b.u
        merged = Edge(start, end, tuple(first) + tuple(second[1:]))
        alive = [k not in (i, j) for k in range(len(g.edges))]
        g.edges.append(merged)
        alive.append(True)
        node_alive = [n != target for n in range(len(g.nodes))]
        _compact(g, alive, node_alive)


def _compact(g, edge_alive, node_alive):
    remap = {}
    nodes = []
    for i, (n, ok) in enumerate(zip(g.nodes, node_alive)):
        if ok:
            remap[i] = len(nodes)
            nodes.append(n)
    edges = []
    for e, ok in zip(g.edges, edge_alive):
        if ok:
            edges.append(Edge(remap[e.u], remap[e.v], e.polyline, e.length, e.curveness, e.volume, e.mean_radius))
    g.nodes, g.edges = nodes, edges
    g.recompute_degrees()


def _canonical(g):
    order = sorted(range(len(g.nodes)), key=lambda i: (g.nodes[i].y, g.nodes[i].x))
    remap = {old: new for new, old in enumerate(order)}
    nodes = [Node(g.nodes[i].x, g.nodes[i].y) for i in order]
    edges = []
    for e in g.edges:
        u, v, poly = remap[e.u], remap[e.v], e.polyline
        if u > v or (u == v and poly[::-1] < poly):
            u, v, poly = v, u, poly[::-1]
        edges.append(Edge(u, v, poly))
    edges.sort(key=lambda e: (e.u, e.v, e.polyline))
    out = VesselGraph(g.width, g.height, nodes, edges)
    out.recompute_degrees()
    return out


def check_graph(g):
    """Assert the structural invariants of an extracted graph."""
    deg = [0] * len(g.nodes)
    for e in g.edges:
        deg[e.u] += 1
        deg[e.v] += 1
        pu, pv = g.nodes[e.u], g.nodes[e.v]
        assert e.polyline[0] == (pu.x, pu.y) and e.polyline[-1] == (pv.x, pv.y), "polyline endpoints"
    assert deg == [n.degree for n in g.nodes], "degrees"
