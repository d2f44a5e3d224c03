"""Cosine relatedness between road nodes and arc weighting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingTable
from .errors import ZeroVector
from .road_graph import RoadGraph, distance_matrix

DEFAULT_FLOOR = 1e-6


@dataclass
class WeightedGraphReport:
    weighted: int
    defaulted: int
    mean_weight: float
    histogram: list = field(default_factory=list)
    bin_edges: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.weighted + self.defaulted

    def as_dict(self):
        return {
            "arcs_weighted": self.weighted,
            "arcs_defaulted": self.defaulted,
            "mean_weight": self.mean_weight,
            "histogram": self.histogram,
            "bin_edges": self.bin_edges,
        }


def cosine(wi, wj) -> float:
    wi = np.asarray(wi, dtype=float)
    wj = np.asarray(wj, dtype=float)
    if wi.shape != wj.shape:
        raise ValueError(f"dimension mismatch {wi.shape} vs {wj.shape}")
    ni = np.linalg.norm(wi)
    nj = np.linalg.norm(wj)
    if ni == 0.0 or nj == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.clip(wi @ wj / (ni * nj), -1.0, 1.0))


def assign_weights(g: RoadGraph, table: EmbeddingTable, floor=DEFAULT_FLOOR) -> WeightedGraphReport:
    """Overwrite every arc weight with max(cosine(u, v), floor), in place.

    Arcs touching a node without an embedding get ``floor`` and are counted
    as defaulted; they stay in the graph so connectivity is unchanged.
    """
    if not 0.0 < floor < 1.0:
        raise ValueError("floor must lie in (0, 1)")
    norms = np.linalg.norm(table.vectors, axis=1)
    weighted = defaulted = 0
    for arc in g.arcs:
        i = table.vocab.index.get(arc.src)
        j = table.vocab.index.get(arc.dst)
        if i is None or j is None or norms[i] == 0.0 or norms[j] == 0.0:
            arc.weight = floor
            defaulted += 1
            continue
        sim = float(table.vectors[i] @ table.vectors[j] / (norms[i] * norms[j]))
        arc.weight = min(1.0, max(sim, floor))
        weighted += 1
    weights = g.arc_weights()
    hist, edges = np.histogram(weights, bins=10, range=(0.0, 1.0))
    mean = float(weights.mean()) if len(weights) else 0.0
    return WeightedGraphReport(weighted, defaulted, mean, hist.tolist(), edges.tolist())


def write_arc_weights(g: RoadGraph, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "from", "to", "weight"])
        for a in g.arcs:
            w.writerow([a.segment_id, a.src, a.dst, repr(float(a.weight))])


def read_arc_weights(g: RoadGraph, path):
    """Apply weights from ``write_arc_weights`` output to matching arcs of ``g``."""
    lookup = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            lookup[(int(row["segment_id"]), int(row["from"]), int(row["to"]))] = float(row["weight"])
    for a in g.arcs:
        key = (a.segment_id, a.src, a.dst)
        if key not in lookup:
            raise KeyError(f"no weight for arc {key}")
        a.weight = lookup[key]
    return g


@dataclass
class ProfileBin:
    bin_center_m: float
    mean_similarity: float
    pair_count: int


def similarity_distance_profile(g: RoadGraph, table: EmbeddingTable, sample_fraction=0.1,
                                bin_width_m=100.0, seed=0):
    """Mean cosine similarity of node pairs binned by network distance.

    For every source node with an embedding a ``sample_fraction`` share of
    the other embedded nodes is drawn; directed shortest-path length decides
    the bin ``[k*w, (k+1)*w)``. Returns ``(bins, unreachable_pairs)``.
    """
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must lie in (0, 1]")
    if bin_width_m <= 0:
        raise ValueError("bin_width_m must be positive")
    rng = np.random.default_rng(seed)
    ids, dist = distance_matrix(g)
    col = {int(n): i for i, n in enumerate(ids)}
    embedded = [int(n) for n in ids if int(n) in table.vocab.index]
    vecs = np.array([table.vectors[table.vocab.index[n]] for n in embedded])
    norms = np.linalg.norm(vecs, axis=1)
    norms[norms == 0.0] = np.inf
    unit = vecs / norms[:, None]
    k = max(1, int(round(sample_fraction * (len(embedded) - 1))))
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    unreachable = 0
    for a, src in enumerate(embedded):
        others = np.array([b for b in range(len(embedded)) if b != a], dtype=np.int64)
        if len(others) == 0:
            continue
        chosen = np.sort(rng.choice(others, size=min(k, len(others)), replace=False))
        d = dist[col[src], [col[embedded[b]] for b in chosen]]
        sims = unit[chosen] @ unit[a]
        for dd, sim in zip(d, sims):
            if not np.isfinite(dd):
                unreachable += 1
                continue
            b = int(dd // bin_width_m)
            sums[b] = sums.get(b, 0.0) + float(sim)
            counts[b] = counts.get(b, 0) + 1
    bins = [ProfileBin((b + 0.5) * bin_width_m, sums[b] / counts[b], counts[b]) for b in sorted(counts)]
    return bins, unreachable


def write_profile(bins, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center_m", "mean_similarity", "pair_count"])
        for b in bins:
            w.writerow([repr(b.bin_center_m), repr(b.mean_similarity), b.pair_count])
