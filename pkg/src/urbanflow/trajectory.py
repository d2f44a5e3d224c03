"""From raw taxi GPS records to a corpus of road-node sentences.

Occupied runs of each vehicle become trips; every trip is snapped to its
nearest road nodes and gaps between non-adjacent nodes are filled with the
shortest driving path, so consecutive tokens of a sentence are always joined
by an arc.
"""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import groupby
from operator import attrgetter

import numpy as np
from scipy.spatial import cKDTree

from .errors import Discarded, Unreachable
from .geo import LocalProjection
from .road_graph import RoadGraph, shortest_path

log = logging.getLogger(__name__)

DEFAULT_RADIUS_M = 100.0
DEFAULT_MAX_GAP_S = 300.0


@dataclass(frozen=True)
class GpsRecord:
    vehicle_id: str
    timestamp: float
    lon: float
    lat: float
    occupied: bool


@dataclass
class Trip:
    vehicle_id: str
    records: list

    @property
    def pickup(self) -> GpsRecord:
        return self.records[0]

    @property
    def dropoff(self) -> GpsRecord:
        return self.records[-1]


@dataclass
class IngestStats:
    trips_in: int = 0
    kept: int = 0
    discarded: Counter = field(default_factory=Counter)
    records_dropped_out_of_range: int = 0
    malformed_rows: int = 0
    token_frequency: Counter = field(default_factory=Counter)

    def as_dict(self):
        return {
            "trips_in": self.trips_in,
            "kept": self.kept,
            "discarded": {k: self.discarded.get(k, 0) for k in
                          (Discarded.NO_NODES_IN_RANGE, Discarded.TOO_SHORT, Discarded.UNREACHABLE_GAP)},
            "records_dropped_out_of_range": self.records_dropped_out_of_range,
            "malformed_rows": self.malformed_rows,
            "tokens": sum(self.token_frequency.values()),
            "distinct_tokens": len(self.token_frequency),
            "token_frequency": {str(k): v for k, v in sorted(self.token_frequency.items())},
        }


@dataclass
class TripCorpus:
    sentences: list = field(default_factory=list)

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def validate(self, g: RoadGraph):
        """Raise ``ValueError`` unless every token is a node and every step an arc."""
        for i, sent in enumerate(self.sentences):
            if len(sent) < 2:
                raise ValueError(f"sentence {i} has fewer than 2 tokens")
            for tok in sent:
                if tok not in g:
                    raise ValueError(f"sentence {i}: token {tok} is not a graph node")
            for a, b in zip(sent, sent[1:]):
                if not g.has_arc(a, b):
                    raise ValueError(f"sentence {i}: no arc {a}->{b}")


def read_gps_csv(path):
    """Parse the trajectory CSV. Returns ``(records, malformed_count)``."""
    records = []
    bad = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                occ = row["occupied"].strip()
                if occ not in ("0", "1"):
                    raise ValueError(occ)
                rec = GpsRecord(
                    vehicle_id=row["vehicle_id"],
                    timestamp=float(row["timestamp"]),
                    lon=float(row["lon"]),
                    lat=float(row["lat"]),
                    occupied=occ == "1",
                )
                if not (np.isfinite(rec.timestamp) and -180 <= rec.lon <= 180 and -90 <= rec.lat <= 90):
                    raise ValueError("out of range")
            except (KeyError, ValueError, TypeError, AttributeError):
                bad += 1
                continue
            records.append(rec)
    if bad:
        log.warning("%s: skipped %d malformed rows", path, bad)
    return records, bad


def write_gps_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vehicle_id", "timestamp", "lon", "lat", "occupied"])
        for r in records:
            w.writerow([r.vehicle_id, repr(float(r.timestamp)), repr(float(r.lon)), repr(float(r.lat)),
                        int(r.occupied)])


def extract_trips(records, max_gap_s=DEFAULT_MAX_GAP_S) -> list[Trip]:
    """Split each vehicle's stream into maximal occupied runs.

    A time gap larger than ``max_gap_s`` inside a run starts a new run; runs
    shorter than two records are dropped.
    """
    trips = []
    ordered = sorted(records, key=attrgetter("vehicle_id", "timestamp"))
    for vid, stream in groupby(ordered, key=attrgetter("vehicle_id")):
        run = []
        for rec in stream:
            if rec.occupied and run and rec.timestamp - run[-1].timestamp > max_gap_s:
                if len(run) >= 2:
                    trips.append(Trip(vid, run))
                run = []
            if rec.occupied:
                run.append(rec)
            else:
                if len(run) >= 2:
                    trips.append(Trip(vid, run))
                run = []
        if len(run) >= 2:
            trips.append(Trip(vid, run))
    return trips


class NodeSnapper:
    """Nearest road node lookup in a local metric projection."""

    def __init__(self, g: RoadGraph):
        ids, lons, lats = g.coordinates()
        self.ids = ids
        self.projection = LocalProjection.around(lons, lats)
        x, y = self.projection.forward(lons, lats)
        self._tree = cKDTree(np.column_stack([x, y]))

    def nearest(self, lons, lats, radius_m):
        """Return ``(node_ids, distances)``; ids are -1 where nothing lies within radius.

        Equidistant candidates resolve to the lowest node id.
        """
        x, y = self.projection.forward(np.atleast_1d(lons), np.atleast_1d(lats))
        k = min(4, len(self.ids))
        dist, idx = self._tree.query(np.column_stack([x, y]), k=k)
        dist = dist.reshape(len(x), k)
        idx = idx.reshape(len(x), k)
        out = np.full(len(x), -1, dtype=np.int64)
        best = dist[:, 0]
        for row in range(len(x)):
            if best[row] > radius_m:
                continue
            ties = idx[row][dist[row] == best[row]]
            out[row] = self.ids[ties].min()
        return out, best


def snap_trip(g: RoadGraph, trip: Trip, radius_m=DEFAULT_RADIUS_M, snapper=None, path_cache=None,
              stats=None) -> list[int]:
    """Turn a trip into a node sequence in which every step is an arc.

    Raises :class:`Discarded` with the reason when no usable sequence remains.
    """
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    snapper = snapper or NodeSnapper(g)
    lons = [r.lon for r in trip.records]
    lats = [r.lat for r in trip.records]
    nodes, _ = snapper.nearest(lons, lats, radius_m)
    if stats is not None:
        stats.records_dropped_out_of_range += int((nodes < 0).sum())
    snapped = [int(n) for n in nodes if n >= 0]
    if not snapped:
        raise Discarded(Discarded.NO_NODES_IN_RANGE)
    collapsed = [snapped[0]]
    for n in snapped[1:]:
        if n != collapsed[-1]:
            collapsed.append(n)
    if len(collapsed) < 2:
        raise Discarded(Discarded.TOO_SHORT, f"{len(collapsed)} distinct node")
    seq = [collapsed[0]]
    for a, b in zip(collapsed, collapsed[1:]):
        if g.has_arc(a, b):
            seq.append(b)
            continue
        key = (a, b)
        if path_cache is not None and key in path_cache:
            fill = path_cache[key]
        else:
            try:
                fill = shortest_path(g, a, b)
            except Unreachable:
                fill = None
            if path_cache is not None:
                path_cache[key] = fill
        if fill is None:
            raise Discarded(Discarded.UNREACHABLE_GAP, f"{a}->{b}")
        seq.extend(fill[1:])
    return seq


def build_corpus(g: RoadGraph, trips, radius_m=DEFAULT_RADIUS_M) -> tuple[TripCorpus, IngestStats]:
    stats = IngestStats()
    corpus = TripCorpus()
    if not trips:
        return corpus, stats
    snapper = NodeSnapper(g)
    cache: dict = {}
    for trip in trips:
        stats.trips_in += 1
        try:
            seq = snap_trip(g, trip, radius_m, snapper=snapper, path_cache=cache, stats=stats)
        except Discarded as exc:
            stats.discarded[exc.reason] += 1
            continue
        corpus.sentences.append(seq)
        stats.token_frequency.update(seq)
        stats.kept += 1
    log.info("corpus: kept %d of %d trips", stats.kept, stats.trips_in)
    return corpus, stats


def write_corpus(corpus: TripCorpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sent in corpus.sentences:
            fh.write(" ".join(str(t) for t in sent))
            fh.write("\n")


def read_corpus(path) -> TripCorpus:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                sentences.append([int(t) for t in toks])
    return TripCorpus(sentences)
