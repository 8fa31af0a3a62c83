"""Attributed vessel graph and its JSON interchange format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class Node:
    x: int
    y: int
    degree: int = 0


@dataclass
class Edge:
    u: int
    v: int
    polyline: tuple  # ((x, y), ...) from node u to node v
    length: float = 0.0
    curveness: float = 1.0
    volume: float = 0.0
    mean_radius: float = 0.0

    @property
    def is_loop(self):
        return self.u == self.v


@dataclass
class VesselGraph:
    width: int
    height: int
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def recompute_degrees(self):
        for n in self.nodes:
            n.degree = 0
        for e in self.edges:
            self.nodes[e.u].degree += 1
            self.nodes[e.v].degree += 1

    def __len__(self):
        return len(self.nodes)


class GraphFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _num(x):
    return float(f"{x:.9g}")


def to_dict(g):
    return {
        "width": int(g.width),
        "height": int(g.height),
        "nodes": [{"x": int(n.x), "y": int(n.y), "degree": int(n.degree)} for n in g.nodes],
        "edges": [
            {
                "u": int(e.u),
                "v": int(e.v),
                "polyline": [[int(x), int(y)] for x, y in e.polyline],
                "length": _num(e.length),
                "curveness": _num(e.curveness),
                "volume": _num(e.volume),
                "mean_radius": _num(e.mean_radius),
            }
            for e in g.edges
        ],
    }


def serialize(g):
    return json.dumps(to_dict(g), separators=(",", ":")).encode("utf-8")


def _byte_offset(text, char_pos):
    return len(text[:char_pos].encode("utf-8"))


def deserialize(blob):
    try:
        text = blob.decode("utf-8") if isinstance(blob, (bytes, bytearray)) else str(blob)
    except UnicodeDecodeError as exc:
        raise GraphFormatError("invalid UTF-8", exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(exc.msg, _byte_offset(text, exc.pos)) from exc

    def fail(msg, key):
        pos = text.find(f'"{key}"')
        raise GraphFormatError(msg, _byte_offset(text, max(pos, 0)))

    if not isinstance(doc, dict):
        raise GraphFormatError("top level must be an object", 0)
    for key in ("width", "height", "nodes", "edges"):
        if key not in doc:
            fail(f"missing field {key!r}", key)
    try:
        nodes = [Node(int(n["x"]), int(n["y"]), int(n["degree"])) for n in doc["nodes"]]
    except (KeyError, TypeError, ValueError) as exc:
        fail(f"malformed node: {exc}", "nodes")
    edges = []
    for e in doc["edges"]:
        try:
            edge = Edge(int(e["u"]), int(e["v"]), tuple((int(p[0]), int(p[1])) for p in e["polyline"]),
                        float(e["length"]), float(e["curveness"]), float(e["volume"]), float(e["mean_radius"]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            fail(f"malformed edge: {exc}", "edges")
        if not (0 <= edge.u < len(nodes) and 0 <= edge.v < len(nodes)):
            fail(f"edge endpoint out of range: {edge.u}-{edge.v}", "edges")
        edges.append(edge)
    return VesselGraph(int(doc["width"]), int(doc["height"]), nodes, edges)


def save_graph(g, path):
    with open(path, "wb") as fh:
        fh.write(serialize(g))


def load_graph(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
