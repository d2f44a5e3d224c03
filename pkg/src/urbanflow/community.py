"""Map-equation community detection on the weighted road graph.

A random walker follows arcs in proportion to their weight and teleports to
a uniformly random node with probability ``tau``. Teleport steps are not
recorded, so module exit flow only counts real link steps. Partitions are
scored with the two-level map equation (bits) and searched greedily:
node moves, aggregation of modules into super-nodes, then fine and coarse
re-tuning until nothing improves. Deeper levels come from re-running the
search inside each module on its own induced subgraph.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from .errors import NoConvergence
from .road_graph import RoadGraph

log = logging.getLogger(__name__)

MIN_IMPROVEMENT = 1e-10
WEIGHT_MODES = ("relatedness", "o-infomap", "d-infomap")


def plogp(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log2(x[pos])
    return out


def _plogp(x: float) -> float:
    return x * np.log2(x) if x > 0.0 else 0.0


@dataclass
class FlowModel:
    node_ids: np.ndarray
    node_flow: np.ndarray
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_flow: np.ndarray
    tau: float
    residual: float = 0.0
    iterations: int = 0
    dangling: int = 0

    def __len__(self):
        return len(self.node_ids)

    def index(self):
        return {int(n): i for i, n in enumerate(self.node_ids)}


@dataclass
class Partition:
    """Module assignment aligned with ``node_ids``; module ids are 0..m-1."""

    node_ids: np.ndarray
    membership: np.ndarray

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.membership = _relabel(np.asarray(self.membership, dtype=np.int64))

    @classmethod
    def from_mapping(cls, mapping):
        ids = sorted(mapping)
        return cls(np.array(ids, dtype=np.int64), np.array([mapping[i] for i in ids], dtype=np.int64))

    @classmethod
    def single(cls, node_ids):
        return cls(node_ids, np.zeros(len(node_ids), dtype=np.int64))

    @classmethod
    def singletons(cls, node_ids):
        return cls(node_ids, np.arange(len(node_ids), dtype=np.int64))

    @property
    def num_modules(self) -> int:
        return int(self.membership.max()) + 1 if len(self.membership) else 0

    def as_dict(self) -> dict:
        return {int(n): int(m) for n, m in zip(self.node_ids, self.membership)}

    def module_of(self, node) -> int:
        return self.as_dict()[int(node)]

    def modules(self) -> list[list[int]]:
        out = [[] for _ in range(self.num_modules)]
        for n, m in zip(self.node_ids, self.membership):
            out[m].append(int(n))
        return out

    def aligned(self, node_ids) -> np.ndarray:
        """Membership reordered to match ``node_ids``."""
        lookup = self.as_dict()
        return np.array([lookup[int(n)] for n in node_ids], dtype=np.int64)


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0..m-1 by first appearance."""
    seen: dict[int, int] = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        if lab not in seen:
            seen[lab] = len(seen)
        out[i] = seen[lab]
    return out


# --- flow ---

def _graph_arrays(g: RoadGraph):
    ids = np.array(g.node_ids(), dtype=np.int64)
    index = {int(n): i for i, n in enumerate(ids)}
    src = np.array([index[a.src] for a in g.arcs], dtype=np.int64)
    dst = np.array([index[a.dst] for a in g.arcs], dtype=np.int64)
    w = np.array([a.weight for a in g.arcs], dtype=float)
    return ids, src, dst, w


def compute_flow(g: RoadGraph, tau=0.15, tol=1e-12, max_iter=10000) -> FlowModel:
    ids, src, dst, w = _graph_arrays(g)
    return flow_from_arcs(ids, src, dst, w, tau=tau, tol=tol, max_iter=max_iter)


def flow_from_arcs(node_ids, src, dst, weights, tau=0.15, tol=1e-12, max_iter=10000) -> FlowModel:
    """Stationary visit rates and recorded arc flows of the teleporting walker.

    ``src``/``dst`` index into ``node_ids``. Parallel arcs are summed and
    zero-weight arcs ignored. Nodes without out-weight send all their mass
    through teleportation.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must lie in [0, 1)")
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("arc weights must be finite and non-negative")
    n = len(node_ids)
    if n == 0:
        raise ValueError("empty graph")
    keep = weights > 0
    mat = csr_matrix((weights[keep], (np.asarray(src)[keep], np.asarray(dst)[keep])), shape=(n, n))
    mat.sum_duplicates()
    mat.eliminate_zeros()
    out_w = np.asarray(mat.sum(axis=1)).ravel()
    dangling = out_w == 0
    scale = np.zeros(n)
    scale[~dangling] = 1.0 / out_w[~dangling]
    trans = csr_matrix(mat.multiply(scale[:, None]))
    trans_t = trans.T.tocsr()
    p = np.full(n, 1.0 / n)
    residual = np.inf
    # tau = 0 may leave the chain periodic; the lazy walk has the same
    # fixed point and always converges
    lazy = tau == 0.0
    for it in range(1, max_iter + 1):
        linked = (1.0 - tau) * (trans_t @ p)
        teleport = tau * p[~dangling].sum() + p[dangling].sum()
        new = linked + teleport / n
        if lazy:
            new = 0.9 * new + 0.1 * p
        new /= new.sum()
        residual = float(np.abs(new - p).sum())
        p = new
        if residual < tol:
            break
    else:
        raise NoConvergence(max_iter, residual)
    coo = trans.tocoo()
    arc_flow = (1.0 - tau) * p[coo.row] * coo.data
    return FlowModel(np.asarray(node_ids, dtype=np.int64), p, coo.row.astype(np.int64),
                     coo.col.astype(np.int64), arc_flow, tau, residual, it, int(dangling.sum()))


# --- map equation ---

def _membership_for(flow: FlowModel, part) -> np.ndarray:
    if isinstance(part, Partition):
        return part.aligned(flow.node_ids)
    if isinstance(part, dict):
        return np.array([part[int(n)] for n in flow.node_ids], dtype=np.int64)
    return np.asarray(part, dtype=np.int64)


def module_exit_flows(flow: FlowModel, membership) -> tuple[np.ndarray, np.ndarray]:
    m = _relabel(np.asarray(membership, dtype=np.int64))
    k = int(m.max()) + 1
    cross = m[flow.arc_src] != m[flow.arc_dst]
    exits = np.bincount(m[flow.arc_src[cross]], weights=flow.arc_flow[cross], minlength=k)
    mod_flow = np.bincount(m, weights=flow.node_flow, minlength=k)
    return exits, mod_flow


def codelength(flow: FlowModel, part) -> float:
    """Two-level map equation in bits for ``part`` (Partition, dict or array)."""
    exits, mod_flow = module_exit_flows(flow, _membership_for(flow, part))
    return _map_equation(exits, mod_flow, -plogp(flow.node_flow).sum())


def _map_equation(exits, mod_flow, node_entropy_term):
    # expanded form of q H(Q) + sum_i p_i H(P^i)
    return float(_plogp(exits.sum()) - 2.0 * plogp(exits).sum() + node_entropy_term
                 + plogp(exits + mod_flow).sum())


# --- greedy search ---

class _Network:
    """A (possibly aggregated) network of flow units and their link flows."""

    def __init__(self, node_flow, links):
        self.n = len(node_flow)
        self.flow = np.asarray(node_flow, dtype=float)
        self.out = [dict() for _ in range(self.n)]
        self.inn = [dict() for _ in range(self.n)]
        for (i, j), f in links.items():
            if i == j or f <= 0.0:
                continue
            self.out[i][j] = f
            self.inn[j][i] = f
        self.out_total = np.array([sum(d.values()) for d in self.out])

    @classmethod
    def from_flow(cls, flow: FlowModel, members=None):
        """Leaf network, optionally restricted to the index subset ``members``."""
        if members is None:
            links = defaultdict(float)
            for i, j, f in zip(flow.arc_src.tolist(), flow.arc_dst.tolist(), flow.arc_flow.tolist()):
                links[(i, j)] += f
            return cls(flow.node_flow, links)
        local = {int(g): k for k, g in enumerate(members)}
        links = defaultdict(float)
        for i, j, f in zip(flow.arc_src.tolist(), flow.arc_dst.tolist(), flow.arc_flow.tolist()):
            if i in local and j in local:
                links[(local[i], local[j])] += f
        return cls(flow.node_flow[np.asarray(members)], links)

    def aggregate(self, labels):
        k = int(labels.max()) + 1
        flow = np.bincount(labels, weights=self.flow, minlength=k)
        links = defaultdict(float)
        for i in range(self.n):
            li = labels[i]
            for j, f in self.out[i].items():
                lj = labels[j]
                if li != lj:
                    links[(li, lj)] += f
        return _Network(flow, links)


class _Search:
    def __init__(self, node_entropy_term, rng, move_log=None):
        self.h_nodes = node_entropy_term
        self.rng = rng
        self.move_log = move_log

    def local_moves(self, net: _Network, labels: np.ndarray) -> np.ndarray:
        """Move single units between modules until no move lowers the codelength."""
        n = net.n
        mod = np.array(labels, dtype=np.int64)
        mod_flow = np.zeros(n)
        mod_exit = np.zeros(n)
        size = np.zeros(n, dtype=np.int64)
        np.add.at(mod_flow, mod, net.flow)
        np.add.at(size, mod, 1)
        for i in range(n):
            for j, f in net.out[i].items():
                if mod[i] != mod[j]:
                    mod_exit[mod[i]] += f
        total_exit = mod_exit.sum()
        sum_exit = plogp(mod_exit).sum()
        sum_circ = plogp(mod_exit + mod_flow).sum()
        current = _plogp(total_exit) - 2 * sum_exit + self.h_nodes + sum_circ
        free = sorted(set(range(n)) - set(mod.tolist()))

        for _ in range(10_000):
            moved = 0
            for a in self.rng.permutation(n).tolist():
                A = int(mod[a])
                out_to = defaultdict(float)
                in_from = defaultdict(float)
                for j, f in net.out[a].items():
                    out_to[int(mod[j])] += f
                for j, f in net.inn[a].items():
                    in_from[int(mod[j])] += f
                candidates = (set(out_to) | set(in_from)) - {A}
                if size[A] > 1 and free:
                    candidates.add(free[0])
                if not candidates:
                    continue
                fa = net.flow[a]
                oa = net.out_total[a]
                eA, fA = mod_exit[A], mod_flow[A]
                new_eA = eA - oa + out_to.get(A, 0.0) + in_from.get(A, 0.0)
                new_fA = fA - fa
                base_exit = total_exit - eA
                base_sum_exit = sum_exit - _plogp(eA)
                base_circ = sum_circ - _plogp(eA + fA)
                best_delta = 0.0
                best = None
                for B in sorted(candidates):
                    eB, fB = mod_exit[B], mod_flow[B]
                    new_eB = eB + oa - out_to.get(B, 0.0) - in_from.get(B, 0.0)
                    new_fB = fB + fa
                    t_exit = base_exit - eB + new_eA + new_eB
                    s_exit = base_sum_exit - _plogp(eB) + _plogp(new_eA) + _plogp(new_eB)
                    s_circ = base_circ - _plogp(eB + fB) + _plogp(new_eA + new_fA) + _plogp(new_eB + new_fB)
                    delta = _plogp(t_exit) - 2 * s_exit + self.h_nodes + s_circ - current
                    # candidates arrive in id order, so ties keep the lowest id
                    if best is None or delta < best_delta - 1e-15:
                        best_delta = delta
                        best = (B, new_eB, new_fB, t_exit, s_exit, s_circ)
                if best is None or best_delta >= -MIN_IMPROVEMENT:
                    continue
                B, new_eB, new_fB, total_exit, sum_exit, sum_circ = best
                if size[B] == 0:
                    free.remove(B)
                mod_exit[A], mod_flow[A] = new_eA, new_fA
                mod_exit[B], mod_flow[B] = new_eB, new_fB
                size[A] -= 1
                size[B] += 1
                if size[A] == 0:
                    mod_exit[A] = mod_flow[A] = 0.0
                    free.append(A)
                    free.sort()
                mod[a] = B
                if self.move_log is not None:
                    self.move_log.append((current, current + best_delta))
                current += best_delta
                moved += 1
            if moved == 0:
                break
            # resynchronise running sums against accumulated rounding
            mod_exit[:] = 0.0
            for i in range(n):
                for j, f in net.out[i].items():
                    if mod[i] != mod[j]:
                        mod_exit[mod[i]] += f
            total_exit = mod_exit.sum()
            sum_exit = plogp(mod_exit).sum()
            sum_circ = plogp(mod_exit + mod_flow).sum()
            current = _plogp(total_exit) - 2 * sum_exit + self.h_nodes + sum_circ
        return _relabel(mod)

    def core(self, net: _Network, labels: np.ndarray) -> np.ndarray:
        """Local moves, then recurse on the module-aggregated network."""
        labels = self.local_moves(net, labels)
        k = int(labels.max()) + 1
        if k == net.n or k == 1:
            return labels
        agg = net.aggregate(labels)
        upper = self.core(agg, np.arange(agg.n, dtype=np.int64))
        return upper[labels]

    def coarse_tune(self, flow: FlowModel, leaf: _Network, labels: np.ndarray) -> np.ndarray:
        """Split every module into sub-modules, then move sub-modules as units."""
        sub_labels = np.empty(leaf.n, dtype=np.int64)
        parents = []
        offset = 0
        for m in range(int(labels.max()) + 1):
            members = np.flatnonzero(labels == m)
            sub = _Network.from_flow(flow, members)
            local = self.core(sub, np.arange(len(members), dtype=np.int64))
            sub_labels[members] = local + offset
            k = int(local.max()) + 1
            parents.extend([m] * k)
            offset += k
        agg = leaf.aggregate(sub_labels)
        upper = self.core(agg, np.array(parents, dtype=np.int64))
        return _relabel(upper[sub_labels])


def optimize_two_level(flow: FlowModel, seed=0, trials=10, move_log=None) -> Partition:
    """Greedy map-equation minimisation; never worse than all-singletons.

    Each trial starts bottom-up from singletons; one extra run starts
    top-down from a single module, where the only moves available are nodes
    splitting off. Every start is polished by alternating fine tuning (node
    moves from the current modules) and coarse tuning (sub-module moves)
    until neither lowers the codelength.
    """
    rng = np.random.default_rng(seed)
    h_nodes = float(-plogp(flow.node_flow).sum())
    leaf = _Network.from_flow(flow)
    n = leaf.n
    best_labels = np.arange(n, dtype=np.int64)
    best_len = codelength(flow, best_labels)
    starts = [np.arange(n, dtype=np.int64)] * max(1, trials) + [np.zeros(n, dtype=np.int64)]
    for start in starts:
        search = _Search(h_nodes, rng, move_log)
        labels = search.core(leaf, start.copy())
        length = codelength(flow, labels)
        while True:
            improved = False
            for tune in (lambda lab: search.core(leaf, lab),
                         lambda lab: search.coarse_tune(flow, leaf, lab)):
                cand = tune(labels)
                cand_len = codelength(flow, cand)
                if cand_len < length - MIN_IMPROVEMENT:
                    labels, length = cand, cand_len
                    improved = True
            if not improved:
                break
        if length < best_len - MIN_IMPROVEMENT:
            best_labels, best_len = labels, length
    return Partition(flow.node_ids, _canonical(flow.node_ids, best_labels))


def _canonical(node_ids, labels):
    """Number modules by their smallest node id."""
    order = np.argsort(node_ids, kind="stable")
    return _relabel(np.asarray(labels)[order])[np.argsort(order, kind="stable")]


# --- hierarchy ---

@dataclass
class DetectConfig:
    tau: float = 0.15
    seed: int = 0
    max_levels: int = 3
    min_module_size: int = 5
    tolerance: float = 1e-12
    max_iter: int = 10000
    weight_mode: str = "relatedness"
    trials: int = 10

    def __post_init__(self):
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        if self.min_module_size < 1:
            raise ValueError("min_module_size must be >= 1")
        self.weight_mode = _normalise_mode(self.weight_mode)


def _normalise_mode(mode):
    key = str(mode).strip().lower().replace("_", "-")
    aliases = {"o": "o-infomap", "d": "d-infomap", "oinfomap": "o-infomap", "dinfomap": "d-infomap"}
    key = aliases.get(key, key)
    if key not in WEIGHT_MODES:
        raise ValueError(f"weight mode must be one of {WEIGHT_MODES}, got {mode!r}")
    return key


@dataclass
class HierarchicalPartition:
    """Nested partitions; ``levels[0]`` is the coarsest.

    Each level stores a global module id per node (aligned with
    ``node_ids``), numbered so that sorting by (parent id, local id) gives the
    global order.
    """

    node_ids: np.ndarray
    levels: list
    mean_weights: list = field(default_factory=list)
    codelengths: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def partition(self, level: int) -> Partition:
        """Partition at 1-based ``level``."""
        return Partition(self.node_ids, self.levels[level - 1])

    def num_modules(self, level: int) -> int:
        return int(self.levels[level - 1].max()) + 1

    def local_ids(self, level: int) -> np.ndarray:
        """Module ids counted within the parent module at ``level - 1``."""
        glob = self.levels[level - 1]
        if level == 1:
            return glob.copy()
        parent = self.levels[level - 2]
        first = {}
        for p, g in sorted(set(zip(parent.tolist(), glob.tolist()))):
            first.setdefault(p, g)
        return np.array([g - first[p] for p, g in zip(parent.tolist(), glob.tolist())], dtype=np.int64)

    def check(self):
        """Raise ``AssertionError`` unless every level covers all nodes and refines its parent."""
        n = len(self.node_ids)
        for k, lev in enumerate(self.levels):
            if len(lev) != n:
                raise AssertionError(f"level {k + 1} does not cover every node")
            if set(lev.tolist()) != set(range(int(lev.max()) + 1)):
                raise AssertionError(f"level {k + 1} module ids are not contiguous")
        for k in range(1, len(self.levels)):
            parent_of = {}
            for p, c in zip(self.levels[k - 1].tolist(), self.levels[k].tolist()):
                if parent_of.setdefault(c, p) != p:
                    raise AssertionError(f"level {k + 1} module {c} spans several level-{k} modules")


def _sub_seed(seed, level, module):
    return int(np.random.SeedSequence([int(seed), level, module]).generate_state(1)[0])


def detect_hierarchy(g: RoadGraph, cfg: DetectConfig | None = None) -> HierarchicalPartition:
    cfg = cfg or DetectConfig()
    work = g if cfg.weight_mode == "relatedness" else baseline_weights(g, cfg.weight_mode)
    flow = compute_flow(work, cfg.tau, cfg.tolerance, cfg.max_iter)
    top = optimize_two_level(flow, _sub_seed(cfg.seed, 1, 0), cfg.trials)
    node_ids = flow.node_ids
    levels = [top.membership.copy()]
    lengths = [codelength(flow, top)]
    # (members, splittable) per module at the current level, in global id order
    groups = [(node_ids[top.membership == m], True) for m in range(top.num_modules)]
    for level in range(2, cfg.max_levels + 1):
        index = {int(n): i for i, n in enumerate(node_ids)}
        labels = np.empty(len(node_ids), dtype=np.int64)
        next_groups = []
        for m, (members, splittable) in enumerate(groups):
            parts = [(members, False)]
            if splittable and len(members) >= cfg.min_module_size:
                sub_flow = compute_flow(work.subgraph(members.tolist()), cfg.tau, cfg.tolerance, cfg.max_iter)
                sub = optimize_two_level(sub_flow, _sub_seed(cfg.seed, level, m), cfg.trials)
                single = codelength(sub_flow, np.zeros(len(sub_flow), dtype=np.int64))
                if sub.num_modules > 1 and codelength(sub_flow, sub) < single - MIN_IMPROVEMENT:
                    parts = [(sub_flow.node_ids[sub.membership == k], True) for k in range(sub.num_modules)]
            for sub_members, flag in parts:
                for nid in sub_members.tolist():
                    labels[index[nid]] = len(next_groups)
                next_groups.append((np.sort(sub_members), flag))
        levels.append(labels)
        lengths.append(codelength(flow, labels))
        groups = next_groups
    hp = HierarchicalPartition(node_ids, levels, codelengths=lengths)
    hp.mean_weights = [intra_module_mean_weight(g, hp.partition(k)) for k in range(1, hp.depth + 1)]
    return hp


def intra_module_mean_weight(g: RoadGraph, part: Partition):
    """Mean weight of arcs whose endpoints share a module (None if there are none)."""
    lookup = part.as_dict()
    w = [a.weight for a in g.arcs if lookup[a.src] == lookup[a.dst]]
    return float(np.mean(w)) if w else None


def baseline_weights(g: RoadGraph, mode) -> RoadGraph:
    """Copy of ``g`` re-weighted for the comparison runs.

    ``o-infomap`` sets every arc to 1, ``d-infomap`` to its segment length.
    """
    mode = _normalise_mode(mode)
    out = g.copy()
    if mode == "o-infomap":
        for a in out.arcs:
            a.weight = 1.0
    elif mode == "d-infomap":
        for a in out.arcs:
            a.weight = float(a.length_m)
    return out


# --- persistence ---

def write_partition_csv(hp: HierarchicalPartition, path):
    locals_ = [hp.local_ids(k) for k in range(1, hp.depth + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id"] + [f"level{k}" for k in range(1, hp.depth + 1)] + ["global_id"])
        for i, nid in enumerate(hp.node_ids.tolist()):
            w.writerow([nid] + [int(l[i]) for l in locals_] + [int(hp.levels[-1][i])])


def read_partition_csv(path) -> HierarchicalPartition:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        level_cols = [c for c in reader.fieldnames if c.startswith("level")]
        level_cols.sort(key=lambda c: int(c[5:]))
        rows = [(int(r["node_id"]), [int(r[c]) for c in level_cols]) for r in reader]
    rows.sort()
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    levels = []
    for k in range(len(level_cols)):
        paths = [tuple(r[1][:k + 1]) for r in rows]
        rank = {p: i for i, p in enumerate(sorted(set(paths)))}
        levels.append(np.array([rank[p] for p in paths], dtype=np.int64))
    return HierarchicalPartition(ids, levels)
