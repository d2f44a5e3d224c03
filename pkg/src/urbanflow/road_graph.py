"""Road network as a weighted directed graph.

Nodes are intersections/endpoints, arcs are driving directions of road
segments. A two-way segment expands into two arcs that share the segment id;
a one-way segment yields a single arc. Every arc carries its own weight,
initialised to 1.0 and later overwritten by the relatedness pass.
"""
from __future__ import annotations

import csv
import heapq
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DanglingEdge, DuplicateNodeId, MalformedRow, Unreachable
from .geo import haversine_m

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoadNode:
    id: int
    lon: float
    lat: float


@dataclass
class Arc:
    src: int
    dst: int
    segment_id: int
    length_m: float
    weight: float = 1.0


@dataclass
class SimplifyReport:
    self_loops: list = field(default_factory=list)
    merged_duplicates: list = field(default_factory=list)
    isolated_nodes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "self_loops": len(self.self_loops),
            "merged_duplicates": len(self.merged_duplicates),
            "isolated_nodes": len(self.isolated_nodes),
        }


class RoadGraph:
    """Directed road graph with forward and reverse adjacency indices."""

    def __init__(self, nodes=(), arcs=()):
        self.nodes: dict[int, RoadNode] = {}
        self.arcs: list[Arc] = []
        self._out: dict[int, list[Arc]] = {}
        self._in: dict[int, list[Arc]] = {}
        for n in nodes:
            self.add_node(n)
        for a in arcs:
            self.add_arc(a)

    def add_node(self, node: RoadNode):
        if node.id in self.nodes:
            raise DuplicateNodeId(f"duplicate node id {node.id}")
        if not (-180.0 <= node.lon <= 180.0 and -90.0 <= node.lat <= 90.0):
            raise ValueError(f"node {node.id} has out-of-range coordinates ({node.lon}, {node.lat})")
        self.nodes[node.id] = node
        self._out[node.id] = []
        self._in[node.id] = []

    def add_arc(self, arc: Arc):
        for end in (arc.src, arc.dst):
            if end not in self.nodes:
                raise DanglingEdge(f"segment {arc.segment_id} references unknown node {end}")
        self.arcs.append(arc)
        self._out[arc.src].append(arc)
        self._in[arc.dst].append(arc)

    def out_arcs(self, node_id) -> list[Arc]:
        return self._out[node_id]

    def in_arcs(self, node_id) -> list[Arc]:
        return self._in[node_id]

    def successors(self, node_id):
        return [a.dst for a in self._out[node_id]]

    def predecessors(self, node_id):
        return [a.src for a in self._in[node_id]]

    def has_arc(self, src, dst) -> bool:
        return any(a.dst == dst for a in self._out.get(src, ()))

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node_id):
        return node_id in self.nodes

    def copy(self) -> "RoadGraph":
        return RoadGraph(
            self.nodes.values(),
            (Arc(a.src, a.dst, a.segment_id, a.length_m, a.weight) for a in self.arcs),
        )

    def subgraph(self, node_ids) -> "RoadGraph":
        keep = set(node_ids)
        return RoadGraph(
            (self.nodes[n] for n in sorted(keep)),
            (Arc(a.src, a.dst, a.segment_id, a.length_m, a.weight)
             for a in self.arcs if a.src in keep and a.dst in keep),
        )

    def arc_weights(self) -> np.ndarray:
        return np.array([a.weight for a in self.arcs], dtype=float)

    def coordinates(self, node_ids=None):
        """Return (ids, lons, lats) arrays, ids sorted ascending by default."""
        ids = self.node_ids() if node_ids is None else list(node_ids)
        lons = np.array([self.nodes[i].lon for i in ids], dtype=float)
        lats = np.array([self.nodes[i].lat for i in ids], dtype=float)
        return np.array(ids, dtype=np.int64), lons, lats

    def segments(self):
        """Collapse arcs back into segment rows ``(id, from, to, oneway, length_m)``.

        Two arcs of one segment running in opposite directions with equal
        length become a single two-way row; anything else is written one-way.
        """
        by_seg = defaultdict(list)
        for a in self.arcs:
            by_seg[a.segment_id].append(a)
        rows = []
        for sid in sorted(by_seg):
            arcs = by_seg[sid]
            if (len(arcs) == 2 and arcs[0].src == arcs[1].dst and arcs[0].dst == arcs[1].src
                    and arcs[0].length_m == arcs[1].length_m):
                rows.append((sid, arcs[0].src, arcs[0].dst, False, arcs[0].length_m))
            else:
                rows.extend((sid, a.src, a.dst, True, a.length_m) for a in arcs)
        return rows


def _parse_int(value, path, line, name):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise MalformedRow(path, line, f"{name}={value!r} is not an integer") from None


def _parse_float(value, path, line, name):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise MalformedRow(path, line, f"{name}={value!r} is not a number") from None
    if not np.isfinite(out):
        raise MalformedRow(path, line, f"{name}={value!r} is not finite")
    return out


def _require_columns(reader, path, needed):
    if reader.fieldnames is None:
        raise MalformedRow(path, 1, "missing header")
    missing = [c for c in needed if c not in reader.fieldnames]
    if missing:
        raise MalformedRow(path, 1, f"header lacks columns {missing}")


def load_road_network(nodes_path, edges_path) -> RoadGraph:
    """Read the node and edge CSVs into a :class:`RoadGraph`."""
    g = RoadGraph()
    with open(nodes_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader, nodes_path, ("id", "lon", "lat"))
        for row in reader:
            line = reader.line_num
            nid = _parse_int(row["id"], nodes_path, line, "id")
            lon = _parse_float(row["lon"], nodes_path, line, "lon")
            lat = _parse_float(row["lat"], nodes_path, line, "lat")
            if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
                raise MalformedRow(nodes_path, line, f"coordinates ({lon}, {lat}) out of range")
            if nid in g.nodes:
                raise DuplicateNodeId(f"{nodes_path}:{line}: duplicate node id {nid}")
            g.add_node(RoadNode(nid, lon, lat))

    with open(edges_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader, edges_path, ("id", "from", "to", "oneway"))
        has_length = "length_m" in reader.fieldnames
        for row in reader:
            line = reader.line_num
            sid = _parse_int(row["id"], edges_path, line, "id")
            u = _parse_int(row["from"], edges_path, line, "from")
            v = _parse_int(row["to"], edges_path, line, "to")
            oneway = row["oneway"].strip()
            if oneway not in ("0", "1"):
                raise MalformedRow(edges_path, line, f"oneway={oneway!r} must be 0 or 1")
            for end in (u, v):
                if end not in g.nodes:
                    raise DanglingEdge(f"{edges_path}:{line}: segment {sid} references unknown node {end}")
            raw_len = row.get("length_m") if has_length else None
            if raw_len not in (None, ""):
                length = _parse_float(raw_len, edges_path, line, "length_m")
                if length <= 0:
                    raise MalformedRow(edges_path, line, f"length_m={length} must be positive")
            else:
                a, b = g.nodes[u], g.nodes[v]
                length = haversine_m(a.lon, a.lat, b.lon, b.lat)
                if length <= 0 and u != v:
                    raise MalformedRow(edges_path, line, "endpoints coincide, length cannot be derived")
            g.add_arc(Arc(u, v, sid, length))
            if oneway == "0":
                g.add_arc(Arc(v, u, sid, length))
    log.info("loaded %d nodes, %d arcs", len(g.nodes), len(g.arcs))
    return g


def export_road_network(g: RoadGraph, nodes_path, edges_path, geojson_path=None):
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lon", "lat"])
        for nid in g.node_ids():
            n = g.nodes[nid]
            w.writerow([nid, repr(n.lon), repr(n.lat)])
    rows = g.segments()
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "from", "to", "oneway", "length_m"])
        for sid, u, v, oneway, length in rows:
            w.writerow([sid, u, v, int(oneway), repr(length)])
    if geojson_path is not None:
        features = []
        for sid, u, v, oneway, length in rows:
            a, b = g.nodes[u], g.nodes[v]
            features.append({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[a.lon, a.lat], [b.lon, b.lat]]},
                "properties": {"id": sid, "from": u, "to": v, "oneway": oneway, "length_m": length},
            })
        Path(geojson_path).write_text(json.dumps({"type": "FeatureCollection", "features": features}))


def simplify(g: RoadGraph) -> tuple[RoadGraph, SimplifyReport]:
    """Drop self-loops, merge parallel arcs (shortest wins) and isolated nodes."""
    report = SimplifyReport()
    best: dict[tuple[int, int], Arc] = {}
    order = []
    for a in g.arcs:
        if a.src == a.dst:
            report.self_loops.append(a)
            continue
        key = (a.src, a.dst)
        if key not in best:
            best[key] = a
            order.append(key)
        else:
            kept = best[key]
            if a.length_m < kept.length_m:
                best[key] = a
                report.merged_duplicates.append(kept)
            else:
                report.merged_duplicates.append(a)
    arcs = [best[k] for k in order]
    touched = {a.src for a in arcs} | {a.dst for a in arcs}
    report.isolated_nodes = [nid for nid in g.node_ids() if nid not in touched]
    out = RoadGraph(
        (g.nodes[n] for n in g.node_ids() if n in touched),
        (Arc(a.src, a.dst, a.segment_id, a.length_m, a.weight) for a in arcs),
    )
    return out, report


def shortest_path(g: RoadGraph, src, dst, metric="length_m") -> list[int]:
    """Minimum-length directed path from ``src`` to ``dst``.

    Among equally short paths the lexicographically smallest node sequence
    is returned, so the answer never depends on arc insertion order.
    """
    if metric != "length_m":
        raise ValueError(f"unsupported metric {metric!r}")
    for end in (src, dst):
        if end not in g.nodes:
            raise KeyError(end)
    if src == dst:
        return [src]
    # heap keys (distance, path): lexicographic order survives extension
    # because two distinct simple paths ending at the same node differ
    # before either one ends.
    best = {src: (0.0, (src,))}
    heap = [(0.0, (src,))]
    done = set()
    while heap:
        dist, path = heapq.heappop(heap)
        u = path[-1]
        if u in done:
            continue
        done.add(u)
        if u == dst:
            return list(path)
        for a in g.out_arcs(u):
            v = a.dst
            if v in done:
                continue
            cand = (dist + a.length_m, path + (v,))
            if v not in best or cand < best[v]:
                best[v] = cand
                heapq.heappush(heap, cand)
    raise Unreachable(src, dst)


def path_length(g: RoadGraph, path) -> float:
    total = 0.0
    for u, v in zip(path, path[1:]):
        total += min(a.length_m for a in g.out_arcs(u) if a.dst == v)
    return total


def distance_matrix(g: RoadGraph, sources=None):
    """Directed shortest-path lengths (meters) via scipy's Dijkstra.

    Returns ``(ids, dist)`` where ``dist[i, j]`` is the distance from
    ``sources[i]`` (or ``ids[i]``) to ``ids[j]``; unreachable entries are inf.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra

    ids = g.node_ids()
    index = {n: i for i, n in enumerate(ids)}
    lengths = {}
    for a in g.arcs:
        key = (index[a.src], index[a.dst])
        if key not in lengths or a.length_m < lengths[key]:
            lengths[key] = a.length_m
    if lengths:
        rows, cols = zip(*lengths)
        data = list(lengths.values())
    else:
        rows, cols, data = (), (), ()
    mat = csr_matrix((data, (rows, cols)), shape=(len(ids), len(ids)))
    src_idx = None if sources is None else [index[s] for s in sources]
    dist = dijkstra(mat, directed=True, indices=src_idx)
    return np.array(ids, dtype=np.int64), np.atleast_2d(dist)
