"""Partition quality: trip-flow containment, land-use mix and functional labels.

PAF here is the share of a day's trips whose origin and destination fall in
the same division. Influence areas of road nodes are approximated by a
raster nearest-node (Thiessen) assignment, which also attributes POIs to
divisions.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .community import Partition
from .errors import EmptyBBox, EmptyRegion, UndefinedIndex, UnknownNode
from .geo import LocalProjection
from .road_graph import RoadGraph


@dataclass(frozen=True)
class Poi:
    id: str
    type: str
    lon: float
    lat: float

    def __post_init__(self):
        if not self.type:
            raise ValueError(f"POI {self.id} has an empty type")


@dataclass(frozen=True)
class OdTrip:
    origin: int
    dest: int
    day: str


@dataclass
class CommunityRegion:
    community: int
    members: list
    pois: list = field(default_factory=list)
    cell_count: int = 0

    def type_counts(self) -> Counter:
        return Counter(p.type for p in self.pois)


def read_pois(path) -> list[Poi]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [Poi(r["id"], r["type"], float(r["lon"]), float(r["lat"])) for r in csv.DictReader(fh)]


def write_pois(pois, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "type", "lon", "lat"])
        for p in pois:
            w.writerow([p.id, p.type, repr(p.lon), repr(p.lat)])


def read_od_trips(path) -> list[OdTrip]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            day = dt.date.fromisoformat(r["day"].strip()).isoformat()
            out.append(OdTrip(int(r["origin_node"]), int(r["dest_node"]), day))
    return out


def write_od_trips(trips, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_node", "dest_node", "day"])
        for t in trips:
            w.writerow([t.origin, t.dest, t.day])


# --- Thiessen raster ---

@dataclass
class RasterGrid:
    projection: LocalProjection
    x0: float
    y0: float
    cell_m: float
    nx: int
    ny: int
    node_label: np.ndarray

    def cell_of(self, lon, lat):
        x, y = self.projection.forward(lon, lat)
        ix = np.floor((x - self.x0) / self.cell_m).astype(np.int64)
        iy = np.floor((y - self.y0) / self.cell_m).astype(np.int64)
        inside = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return ix, iy, inside


def _nearest_lowest_id(tree, ids, points):
    k = min(4, len(ids))
    dist, idx = tree.query(points, k=k)
    dist = dist.reshape(len(points), k)
    idx = idx.reshape(len(points), k)
    best = idx[:, 0].copy()
    tied = np.flatnonzero(dist[:, 1] == dist[:, 0]) if k > 1 else np.array([], dtype=np.int64)
    for r in tied:
        cands = idx[r][dist[r] == dist[r, 0]]
        best[r] = cands[np.argmin(ids[cands])]
    return best


def thiessen_raster(g: RoadGraph, bbox=None, cell_m=50.0) -> RasterGrid:
    """Label every raster cell with its nearest road node (ties to the lowest id)."""
    if cell_m <= 0:
        raise ValueError("cell_m must be positive")
    ids, lons, lats = g.coordinates()
    if len(ids) == 0:
        raise EmptyBBox("graph has no nodes")
    if bbox is None:
        bbox = (lons.min(), lats.min(), lons.max(), lats.max())
    min_lon, min_lat, max_lon, max_lat = map(float, bbox)
    if not (max_lon > min_lon and max_lat > min_lat):
        raise EmptyBBox(f"degenerate bounding box {bbox}")
    proj = LocalProjection(0.5 * (min_lon + max_lon), 0.5 * (min_lat + max_lat))
    (x0, x1), (y0, y1) = proj.forward([min_lon, max_lon], [min_lat, max_lat])
    nx = max(1, int(math.ceil((x1 - x0) / cell_m)))
    ny = max(1, int(math.ceil((y1 - y0) / cell_m)))
    nxs, nys = proj.forward(lons, lats)
    tree = cKDTree(np.column_stack([nxs, nys]))
    cx = x0 + (np.arange(nx) + 0.5) * cell_m
    cy = y0 + (np.arange(ny) + 0.5) * cell_m
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    nearest = _nearest_lowest_id(tree, ids, np.column_stack([gx.ravel(), gy.ravel()]))
    return RasterGrid(proj, float(x0), float(y0), float(cell_m), nx, ny, ids[nearest].reshape(nx, ny))


def assign_pois(g: RoadGraph, part: Partition, pois, bbox=None, cell_m=50.0):
    """Attribute raster cells and POIs to communities.

    Returns ``(regions, dropped)`` where ``dropped`` counts POIs outside the box.
    """
    grid = thiessen_raster(g, bbox, cell_m)
    module = part.as_dict()
    regions = [CommunityRegion(m, sorted(members)) for m, members in enumerate(part.modules())]
    cell_modules = np.vectorize(module.__getitem__, otypes=[np.int64])(grid.node_label)
    for m, count in zip(*np.unique(cell_modules, return_counts=True)):
        regions[int(m)].cell_count = int(count)
    dropped = 0
    if pois:
        ix, iy, inside = grid.cell_of(np.array([p.lon for p in pois]), np.array([p.lat for p in pois]))
        for p, i, j, ok in zip(pois, ix, iy, inside):
            if not ok:
                dropped += 1
                continue
            regions[int(cell_modules[i, j])].pois.append(p)
    return regions, dropped


# --- mixed-use indices ---

def richness(S, n_i) -> float:
    """Margalef richness (S - 1) / ln n."""
    if n_i < 2:
        raise UndefinedIndex("richness needs at least 2 POIs")
    return (S - 1) / math.log(n_i)


def shannon(type_counts) -> float:
    counts = np.array([c for c in dict(type_counts).values() if c > 0], dtype=float)
    total = counts.sum()
    if total < 1:
        raise EmptyRegion("shannon index of an empty region")
    p = counts / total
    return float(-(p * np.log(p)).sum())


def simpson(type_counts) -> float:
    counts = np.array(list(dict(type_counts).values()), dtype=float)
    n = counts.sum()
    if n < 2:
        raise UndefinedIndex("simpson index needs at least 2 POIs")
    return float(1.0 - (counts * (counts - 1)).sum() / (n * (n - 1)))


def region_indices(region: CommunityRegion) -> dict:
    counts = region.type_counts()
    n = sum(counts.values())
    out = {"community": region.community, "pois": n, "types": len(counts),
           "richness": None, "shannon": None, "simpson": None}
    if n >= 1:
        out["shannon"] = shannon(counts)
    if n >= 2:
        out["richness"] = richness(len(counts), n)
        out["simpson"] = simpson(counts)
    return out


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "count": 0}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "count": len(vals)}


# --- trip flows ---

def _od_modules(trips, part):
    module = part.as_dict()
    for t in trips:
        for node in (t.origin, t.dest):
            if node not in module:
                raise UnknownNode(f"trip endpoint {node} is not in the partition")
        yield t, module[t.origin], module[t.dest]


def paf(trips, part: Partition, per_region=False) -> dict:
    """Per-day share of trips that start and end in the same module.

    With ``per_region`` the share is computed per origin module and averaged
    over the modules that emitted trips that day.
    """
    if per_region:
        stats = defaultdict(lambda: defaultdict(lambda: [0, 0]))
        for t, a, b in _od_modules(trips, part):
            cell = stats[t.day][a]
            cell[0] += a == b
            cell[1] += 1
        return {day: float(np.mean([i / n for i, n in by_mod.values()])) for day, by_mod in sorted(stats.items())}
    intra = Counter()
    total = Counter()
    for t, a, b in _od_modules(trips, part):
        total[t.day] += 1
        intra[t.day] += a == b
    return {day: intra[day] / total[day] for day in sorted(total)}


def flow_matrix(trips, part: Partition) -> np.ndarray:
    k = part.num_modules
    mat = np.zeros((k, k), dtype=np.int64)
    for _, a, b in _od_modules(trips, part):
        mat[a, b] += 1
    return mat


def write_flow_matrix(mat, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin"] + [str(j) for j in range(mat.shape[1])])
        for i, row in enumerate(mat):
            w.writerow([i] + [int(x) for x in row])


# --- functional labels ---

def tfidf_labels(regions, top_k=3) -> dict:
    """Rank POI types per region by tf * ln(N / df)."""
    counted = {r.community: r.type_counts() for r in regions}
    if not any(counted.values()):
        raise EmptyRegion("no region holds any POI")
    n_regions = len(regions)
    df = Counter()
    for c in counted.values():
        df.update(c.keys())
    labels = {}
    for r in regions:
        counts = counted[r.community]
        total = sum(counts.values())
        scored = [(t, (c / total) * math.log(n_regions / df[t])) for t, c in counts.items()]
        scored.sort(key=lambda ts: (-ts[1], ts[0]))
        labels[r.community] = scored[:top_k]
    return labels


# --- partition agreement ---

def nmi(labels_a, labels_b) -> float:
    """Normalised mutual information with arithmetic-mean normalisation."""
    a = np.unique(np.asarray(labels_a), return_inverse=True)[1]
    b = np.unique(np.asarray(labels_b), return_inverse=True)[1]
    if len(a) != len(b):
        raise ValueError("label vectors differ in length")
    n = len(a)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    pij = joint / n
    pa = pij.sum(axis=1)
    pb = pij.sum(axis=0)
    ha = -(pa * np.log(pa)).sum()
    hb = -(pb * np.log(pb)).sum()
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = pij > 0
    mi = (pij[nz] * np.log(pij[nz] / np.outer(pa, pb)[nz])).sum()
    return float(max(0.0, mi) / (0.5 * (ha + hb)))


# --- report ---

@dataclass
class EvaluationReport:
    paf: dict
    index_level: int
    regions: list
    summary: dict
    tfidf: dict
    flow_level: int
    flow_matrix: list
    pois_dropped: int = 0
    paf_mode: str = "global"

    def as_dict(self):
        return {
            "paf_mode": self.paf_mode,
            "paf": self.paf,
            "index_level": self.index_level,
            "regions": self.regions,
            "summary": self.summary,
            "tfidf": {str(k): [[t, s] for t, s in v] for k, v in self.tfidf.items()},
            "flow_level": self.flow_level,
            "flow_matrix": self.flow_matrix,
            "pois_dropped": self.pois_dropped,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(g: RoadGraph, hierarchy, pois, trips, index_level=None, flow_level=None,
             cell_m=50.0, top_k=3, min_region_pois=5, per_region_paf=False, bbox=None) -> EvaluationReport:
    """Assemble PAF for every level plus indices, labels and flows at chosen levels.

    ``index_level`` defaults to the finest level and ``flow_level`` to level 2
    (or the finest one when the hierarchy is shallower).
    """
    depth = hierarchy.depth
    index_level = depth if index_level is None else index_level
    flow_level = min(2, depth) if flow_level is None else flow_level
    paf_by_level = {f"level{k}": paf(trips, hierarchy.partition(k), per_region=per_region_paf)
                    for k in range(1, depth + 1)}
    part = hierarchy.partition(index_level)
    regions, dropped = assign_pois(g, part, pois, bbox=bbox, cell_m=cell_m)
    rows = []
    for r in regions:
        row = region_indices(r)
        row["members"] = len(r.members)
        row["cells"] = r.cell_count
        row["area_m2"] = r.cell_count * cell_m * cell_m
        rows.append(row)
    big = [row for row in rows if row["pois"] >= min_region_pois]
    summary = {
        "regions": len(rows),
        "excluded_undefined": sum(row["richness"] is None for row in rows),
        "all": {k: _summary([row[k] for row in rows]) for k in ("richness", "shannon", "simpson")},
        f"min_pois_{min_region_pois}": {k: _summary([row[k] for row in big]) for k in ("richness", "shannon", "simpson")},
    }
    labels = tfidf_labels(regions, top_k) if any(r.pois for r in regions) else {}
    mat = flow_matrix(trips, hierarchy.partition(flow_level))
    return EvaluationReport(paf_by_level, index_level, rows, summary, labels, flow_level,
                            mat.tolist(), dropped, "per_region" if per_region_paf else "global")
