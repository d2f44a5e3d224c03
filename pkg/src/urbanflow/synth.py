"""Synthetic city with planted communities.

``k`` square grid blocks of road nodes are laid out on a lon/lat plane,
densely connected inside (each node links to every block node within
``block_radius`` grid steps) and joined to laterally adjacent blocks by a few
bridge segments. Taxi trips are random walks that stay inside their origin
block with probability ``intra_trip_fraction`` and otherwise cross one
bridge into a neighbouring block. GPS fixes are sampled along each walk at
roughly the taxi sampling interval with a few metres of jitter.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import OdTrip, Poi, write_od_trips, write_pois
from .geo import LocalProjection, haversine_m
from .road_graph import Arc, RoadGraph, RoadNode, export_road_network, shortest_path
from .trajectory import GpsRecord, write_gps_csv

EPOCH_DAY0 = dt.datetime(2015, 5, 9, tzinfo=dt.timezone.utc)


@dataclass
class SynthConfig:
    k_communities: int = 4
    grid_side: int = 8
    block_radius: int = 3
    bridges: int = 2
    intra_trip_fraction: float = 0.9
    trips_per_day: int = 2000
    days: int = 7
    poi_types: int = 6
    dominant_share: float = 0.6
    pois_per_community: int = 60
    spacing_m: float = 100.0
    block_gap_m: float = 200.0
    jitter_m: float = 10.0
    sample_interval_s: float = 50.0
    min_steps: int = 6
    max_steps: int = 20
    vehicles: int = 200
    origin_lon: float = 114.30
    origin_lat: float = 30.55
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.intra_trip_fraction <= 1.0:
            raise ValueError("intra_trip_fraction must lie in [0, 1]")
        if not 0.0 <= self.dominant_share <= 1.0:
            raise ValueError("dominant_share must lie in [0, 1]")
        for name in ("k_communities", "grid_side", "block_radius", "bridges", "trips_per_day", "days", "poi_types",
                     "vehicles", "min_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.bridges > self.grid_side:
            raise ValueError("cannot place more bridges than grid rows")
        if self.max_steps < self.min_steps:
            raise ValueError("max_steps must be >= min_steps")
        if self.jitter_m >= 0.5 * self.spacing_m:
            raise ValueError("jitter must stay well below node spacing")


@dataclass
class SynthCity:
    config: SynthConfig
    graph: RoadGraph
    labels: dict
    records: list
    record_nodes: list
    od_trips: list
    walks: list
    pois: list
    intra: list = field(default_factory=list)

    @property
    def truth(self) -> dict:
        return self.labels


def _block_layout(k):
    cols = int(math.ceil(math.sqrt(k)))
    return [(c % cols, c // cols) for c in range(k)]


def _build_graph(cfg: SynthConfig, rng):
    side = cfg.grid_side
    pitch = (side - 1) * cfg.spacing_m + cfg.block_gap_m
    proj = LocalProjection(cfg.origin_lon, cfg.origin_lat)
    layout = _block_layout(cfg.k_communities)
    g = RoadGraph()
    labels = {}
    positions = {}

    def nid(c, i, j):
        return c * side * side + j * side + i

    for c, (bx, by) in enumerate(layout):
        for j in range(side):
            for i in range(side):
                x = bx * pitch + i * cfg.spacing_m
                y = by * pitch + j * cfg.spacing_m
                lon, lat = proj.inverse(x, y)
                n = nid(c, i, j)
                g.add_node(RoadNode(n, round(float(lon), 7), round(float(lat), 7)))
                labels[n] = c
                positions[n] = (x, y)
    seg = 0

    def add_segment(u, v):
        nonlocal seg
        a, b = g.nodes[u], g.nodes[v]
        length = haversine_m(a.lon, a.lat, b.lon, b.lat)
        g.add_arc(Arc(u, v, seg, length))
        g.add_arc(Arc(v, u, seg, length))
        seg += 1

    # every node links to all block nodes within block_radius grid steps
    # (Chebyshev); a plain 4-neighbour lattice is too sparse for the map
    # equation to prefer whole blocks over small patches
    r = cfg.block_radius
    offsets = [(di, dj) for dj in range(0, r + 1) for di in range(-r, r + 1) if (dj, di) > (0, 0)]
    for c in range(cfg.k_communities):
        for j in range(side):
            for i in range(side):
                for di, dj in offsets:
                    if 0 <= i + di < side and j + dj < side:
                        add_segment(nid(c, i, j), nid(c, i + di, j + dj))
    where = {pos: c for c, pos in enumerate(layout)}
    bridges = {}
    for c, (bx, by) in enumerate(layout):
        for dx, dy in ((1, 0), (0, 1)):
            other = where.get((bx + dx, by + dy))
            if other is None:
                continue
            rows = np.sort(rng.choice(side, size=cfg.bridges, replace=False))
            for r in rows.tolist():
                if dx:
                    u, v = nid(c, side - 1, r), nid(other, 0, r)
                else:
                    u, v = nid(c, r, side - 1), nid(other, r, 0)
                add_segment(u, v)
                bridges.setdefault((c, other), []).append((u, v))
                bridges.setdefault((other, c), []).append((v, u))
    return g, labels, positions, proj, bridges


def _inner_neighbours(g, labels):
    return {n: sorted(v for v in g.successors(n) if labels[v] == labels[n]) for n in g.nodes}


def _walk_inside(inner, start, steps, rng):
    walk = [start]
    prev = None
    for _ in range(steps):
        here = walk[-1]
        nbrs = inner[here]
        forward = [v for v in nbrs if v != prev] or nbrs
        if not forward:
            break
        prev = here
        walk.append(forward[int(rng.integers(len(forward)))])
    return walk


def _sample_records(g, walk, positions, proj, vid, t0, speed, cfg, rng):
    times = [0.0]
    for u, v in zip(walk, walk[1:]):
        length = min(a.length_m for a in g.out_arcs(u) if a.dst == v)
        times.append(times[-1] + length / speed)
    sample_t = list(np.arange(0.0, times[-1], cfg.sample_interval_s)) + [times[-1]]
    records, nodes = [], []
    idx = 0
    for t in sample_t:
        while idx + 1 < len(times) and times[idx + 1] <= t:
            idx += 1
        node = walk[idx]
        x, y = positions[node]
        r = cfg.jitter_m * math.sqrt(rng.random())
        ang = 2 * math.pi * rng.random()
        lon, lat = proj.inverse(x + r * math.cos(ang), y + r * math.sin(ang))
        records.append(GpsRecord(vid, round(t0 + t, 3), round(float(lon), 7), round(float(lat), 7), True))
        nodes.append(node)
    return records, nodes, t0 + times[-1]


def generate(cfg: SynthConfig | None = None) -> SynthCity:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    g, labels, positions, proj, bridges = _build_graph(cfg, rng)
    side = cfg.grid_side
    block_nodes = [[c * side * side + k for k in range(side * side)] for c in range(cfg.k_communities)]
    neighbours = {c: sorted({b for (a, b) in bridges if a == c}) for c in range(cfg.k_communities)}
    inner = _inner_neighbours(g, labels)
    block_graphs = [g.subgraph(nodes) for nodes in block_nodes]
    route_cache = {}

    records, record_nodes, od, walks, intra = [], [], [], [], []
    clock = {}
    for day in range(cfg.days):
        day_start = EPOCH_DAY0 + dt.timedelta(days=day)
        day_iso = day_start.date().isoformat()
        base = day_start.timestamp() + 6 * 3600
        for v in range(cfg.vehicles):
            clock[v] = base + float(rng.uniform(0, 600))
        for t in range(cfg.trips_per_day):
            vid = t % cfg.vehicles
            c = int(rng.integers(cfg.k_communities))
            origin = block_nodes[c][int(rng.integers(side * side))]
            steps = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
            stay = rng.random() < cfg.intra_trip_fraction or not neighbours[c]
            if stay:
                walk = _walk_inside(inner, origin, steps, rng)
                if len(walk) < 2:
                    walk = [origin, g.successors(origin)[0]]
            else:
                other = neighbours[c][int(rng.integers(len(neighbours[c])))]
                u, w = bridges[(c, other)][int(rng.integers(len(bridges[(c, other)])))]
                key = (origin, u)
                if key not in route_cache:
                    route_cache[key] = shortest_path(block_graphs[c], origin, u)
                lead = route_cache[key]
                tail = _walk_inside(inner, w, max(1, steps // 2), rng)
                walk = lead + tail
            speed = float(rng.uniform(7.0, 12.0))
            start = clock[vid]
            # a vacant fix before pick-up and after drop-off delimits the trip
            vacant_before = GpsRecord(str(vid), round(start - 30.0, 3), g.nodes[origin].lon, g.nodes[origin].lat, False)
            recs, nodes, end = _sample_records(g, walk, positions, proj, str(vid), start, speed, cfg, rng)
            vacant_after = GpsRecord(str(vid), round(end + 30.0, 3), g.nodes[walk[-1]].lon, g.nodes[walk[-1]].lat, False)
            records.append(vacant_before)
            records.extend(recs)
            records.append(vacant_after)
            record_nodes.extend(nodes)
            clock[vid] = end + 60.0 + float(rng.uniform(60, 600))
            od.append(OdTrip(walk[0], walk[-1], day_iso))
            walks.append(walk)
            intra.append(bool(stay))

    pois = []
    types = [f"type_{i}" for i in range(cfg.poi_types)]
    pitch = (side - 1) * cfg.spacing_m + cfg.block_gap_m
    extent = (side - 1) * cfg.spacing_m
    for c, (bx, by) in enumerate(_block_layout(cfg.k_communities)):
        dominant = types[c % cfg.poi_types]
        others = [t for t in types if t != dominant] or [dominant]
        for i in range(cfg.pois_per_community):
            kind = dominant if rng.random() < cfg.dominant_share else others[int(rng.integers(len(others)))]
            x = bx * pitch + rng.uniform(0, extent)
            y = by * pitch + rng.uniform(0, extent)
            lon, lat = proj.inverse(x, y)
            pois.append(Poi(f"p{c}_{i}", kind, round(float(lon), 7), round(float(lat), 7)))
    return SynthCity(cfg, g, labels, records, record_nodes, od, walks, pois, intra)


def write_truth(labels, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "community"])
        for n in sorted(labels):
            w.writerow([n, labels[n]])


def read_truth(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["node_id"]): int(r["community"]) for r in csv.DictReader(fh)}


def write_city(city: SynthCity, out_dir):
    """Write every standard input file plus ``truth.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_road_network(city.graph, out / "nodes.csv", out / "edges.csv")
    write_gps_csv(city.records, out / "trajectories.csv")
    write_pois(city.pois, out / "pois.csv")
    write_od_trips(city.od_trips, out / "trips.csv")
    write_truth(city.labels, out / "truth.csv")
    return {name: out / name for name in
            ("nodes.csv", "edges.csv", "trajectories.csv", "pois.csv", "trips.csv", "truth.csv")}
