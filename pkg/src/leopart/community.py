"""Cluster co-occurrence network and map-equation community detection.

Edges carry the minimum of the two conditional spatial-adjacency
probabilities between clusters. Communities are found by greedy local
moving (with module aggregation) minimizing the two-level map equation,
followed by a merge phase that enforces an exact community count. Nodes
without edges go to background.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

DEFAULT_EDGE_THRESHOLD = 0.09
DEFAULT_MARKOV_TIME = 2.0
DEFAULT_K = 150
DEFAULT_DISTANCE = 1
BACKGROUND = -1


class CommunityError(RuntimeError):
    pass


@dataclass
class CoocGraph:
    """Undirected weighted graph over cluster ids 0..n-1.

    ``weights`` is symmetric with zero diagonal (no self-loops);
    ``node_counts`` holds total pixel counts per cluster.
    """

    weights: np.ndarray
    node_counts: np.ndarray

    def __post_init__(self) -> None:
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weights must be square")
        if not np.allclose(w, w.T):
            raise ValueError("weights must be symmetric")
        if np.any(np.diag(w) != 0):
            raise ValueError("no self-loops allowed")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def cooccurrence_graph(cluster_maps: list[np.ndarray], k: int,
                       d: int = DEFAULT_DISTANCE) -> CoocGraph:
    """Build the co-occurrence network from per-image cluster-id grids.

    Per image, P_img(j|i) is the fraction of cluster-i pixels with a
    cluster-j pixel within Chebyshev distance d. P(j|i) averages P_img over
    the images where i appears; the edge weight is the minimum of the two
    directions.
    """
    if d < 1:
        raise ValueError("neighborhood distance must be >= 1")
    cond_sum = np.zeros((k, k))
    appearances = np.zeros(k)
    size = 2 * d + 1
    for cm in cluster_maps:
        cm = np.asarray(cm)
        present = np.unique(cm)
        counts = np.bincount(cm.ravel(), minlength=k)[:k]
        appearances[present] += 1
        dilated = {int(j): maximum_filter((cm == j).astype(np.uint8), size=size,
                                          mode="constant", cval=0).astype(bool)
                   for j in present}
        for j in present:
            near_j = dilated[int(j)]
            # pixels of each cluster i that see a j nearby
            seen = np.bincount(cm[near_j].ravel(), minlength=k)[:k]
            with np.errstate(invalid="ignore"):
                p = np.where(counts > 0, seen / np.maximum(counts, 1), 0.0)
            cond_sum[:, j] += p
    with np.errstate(invalid="ignore"):
        cond = cond_sum / np.maximum(appearances, 1)[:, None]
    w = np.minimum(cond, cond.T)
    np.fill_diagonal(w, 0.0)
    total_counts = np.zeros(k, dtype=np.int64)
    for cm in cluster_maps:
        total_counts += np.bincount(np.asarray(cm).ravel(), minlength=k)[:k]
    return CoocGraph(weights=w, node_counts=total_counts)


def filter_edges(graph: CoocGraph, threshold: float) -> CoocGraph:
    """Drop edges with weight below *threshold*."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must be in [0, 1]")
    w = graph.weights.copy()
    w[w < threshold] = 0.0
    return CoocGraph(weights=w, node_counts=graph.node_counts.copy())


@dataclass
class Partition:
    """Community id per node (0-based); BACKGROUND marks unassigned nodes."""

    assignment: np.ndarray

    def __post_init__(self) -> None:
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    @property
    def n_communities(self) -> int:
        assigned = self.assignment[self.assignment != BACKGROUND]
        return len(np.unique(assigned))

    def canonical(self) -> "Partition":
        """Relabel communities 0..M-1 in order of their smallest node id."""
        out = np.full_like(self.assignment, BACKGROUND)
        next_id = 0
        seen: dict[int, int] = {}
        for node, comm in enumerate(self.assignment):
            if comm == BACKGROUND:
                continue
            if comm not in seen:
                seen[int(comm)] = next_id
                next_id += 1
            out[node] = seen[int(comm)]
        return Partition(out)


def _plogp(x: np.ndarray | float) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    nz = x > 0
    out[nz] = x[nz] * np.log2(x[nz])
    return out if out.ndim else float(out)


def _module_stats(weights: np.ndarray, p: np.ndarray, assignment: np.ndarray,
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(P_m, cut_m, community ids) for assigned nodes."""
    comms = np.unique(assignment[assignment != BACKGROUND])
    p_m = np.zeros(len(comms))
    cut_m = np.zeros(len(comms))
    deg = weights.sum(axis=1)
    for idx, m in enumerate(comms):
        members = assignment == m
        p_m[idx] = p[members].sum()
        internal = weights[np.ix_(members, members)].sum() / 2.0
        cut_m[idx] = deg[members].sum() - 2.0 * internal
    return p_m, cut_m, comms


def _map_equation_terms(p_m: np.ndarray, cut_m: np.ndarray, two_w: float,
                        markov_time: float, node_entropy_term: float) -> float:
    q_m = markov_time * cut_m / two_w
    q_tot = q_m.sum()
    p_circ = p_m + q_m
    return float(
        _plogp(q_tot) - 2.0 * _plogp(q_m).sum() + _plogp(p_circ).sum()
        - node_entropy_term
    )


def map_equation(graph: CoocGraph, partition: Partition,
                 markov_time: float = 1.0) -> float:
    """Two-level map-equation description length in bits.

    Node visit rates come from weighted degrees of the undirected walk;
    inter-module exit flows are scaled linearly by *markov_time*. Nodes with
    zero degree have visit rate zero and contribute nothing.
    """
    deg = graph.degrees()
    two_w = deg.sum()
    if two_w <= 0:
        return 0.0
    p = deg / two_w
    assignment = partition.assignment
    if len(assignment) != graph.n:
        raise ValueError("partition does not cover the graph's nodes")
    active = deg > 0
    if np.any(active & (assignment == BACKGROUND)):
        raise ValueError("partition leaves a connected node unassigned")
    p_m, cut_m, _ = _module_stats(graph.weights, p, assignment)
    return _map_equation_terms(p_m, cut_m, two_w, markov_time, _plogp(p).sum())


class _LocalMover:
    """Greedy map-equation minimization over movable units of nodes."""

    def __init__(self, graph: CoocGraph, markov_time: float, rng: np.random.Generator):
        self.w = graph.weights
        self.deg = graph.degrees()
        self.two_w = float(self.deg.sum())
        self.p = self.deg / self.two_w
        self.t = markov_time
        self.rng = rng
        self.active = np.flatnonzero(self.deg > 0)
        self.assignment = np.full(graph.n, BACKGROUND, dtype=np.int64)
        self.assignment[self.active] = np.arange(len(self.active))
        self.node_entropy = float(_plogp(self.p).sum())

    def level_bits(self) -> float:
        p_m, cut_m, _ = _module_stats(self.w, self.p, self.assignment)
        return _map_equation_terms(p_m, cut_m, self.two_w, self.t, self.node_entropy)

    def _try_unit_moves(self, units: list[np.ndarray]) -> bool:
        """One sweep moving whole units; returns True if anything moved."""
        moved = False
        order = self.rng.permutation(len(units))
        for ui in order:
            unit = units[ui]
            current = int(self.assignment[unit[0]])
            # weight from the unit to each community
            w_unit = self.w[unit].sum(axis=0)
            comm_of = self.assignment
            neighbor_comms = np.unique(comm_of[(w_unit > 0) & (comm_of != BACKGROUND)])
            candidates = [int(c) for c in neighbor_comms if c != current]
            if not candidates:
                continue
            best_bits = self.level_bits()
            best_comm = current
            for cand in candidates:
                self.assignment[unit] = cand
                bits = self.level_bits()
                if bits < best_bits - 1e-12:
                    best_bits = bits
                    best_comm = cand
            self.assignment[unit] = best_comm
            if best_comm != current:
                moved = True
        return moved

    def run(self) -> None:
        improved = True
        while improved:
            improved = False
            # level 1: single-node moves to a local optimum
            units = [np.array([n]) for n in self.active]
            while self._try_unit_moves(units):
                improved = True
            # level 2: aggregated moves of whole communities
            comms = np.unique(self.assignment[self.active])
            units = [np.flatnonzero(self.assignment == m) for m in comms]
            while self._try_unit_moves(units):
                improved = True

    def merge_to_target(self, target_m: int) -> None:
        while True:
            comms = np.unique(self.assignment[self.active])
            if len(comms) <= target_m:
                break
            best = None
            for ai in range(len(comms)):
                for bi in range(ai + 1, len(comms)):
                    saved = self.assignment.copy()
                    self.assignment[self.assignment == comms[bi]] = comms[ai]
                    bits = self.level_bits()
                    self.assignment = saved
                    if best is None or bits < best[0] - 1e-12:
                        best = (bits, comms[ai], comms[bi])
            assert best is not None
            self.assignment[self.assignment == best[2]] = best[1]

    def split_to_target(self, target_m: int) -> None:
        next_comm = int(self.assignment.max()) + 1
        while True:
            comms, sizes = np.unique(self.assignment[self.active], return_counts=True)
            if len(comms) >= target_m:
                break
            best = None
            for m, size in zip(comms, sizes):
                if size < 2:
                    continue
                for node in np.flatnonzero(self.assignment == m):
                    saved = int(self.assignment[node])
                    self.assignment[node] = next_comm
                    bits = self.level_bits()
                    self.assignment[node] = saved
                    if best is None or bits < best[0] - 1e-12:
                        best = (bits, int(node))
            if best is None:
                raise CommunityError("cannot split further to reach the target count")
            self.assignment[best[1]] = next_comm
            next_comm += 1


def detect_communities(graph: CoocGraph, target_m: int,
                       markov_time: float = DEFAULT_MARKOV_TIME,
                       seed: int = 0) -> Partition:
    """Greedy local-moving map-equation communities with an exact count.

    After local optimization, communities are merged (pair with the smallest
    description-length increase first) until exactly *target_m* remain.
    Zero-degree nodes are assigned to background.
    """
    deg = graph.degrees()
    n_active = int((deg > 0).sum())
    if n_active < target_m:
        raise CommunityError(
            f"only {n_active} nodes have edges; at most {n_active} communities "
            f"are achievable, requested {target_m}"
        )
    mover = _LocalMover(graph, markov_time, np.random.default_rng([seed, 29]))
    mover.run()
    mover.merge_to_target(target_m)
    mover.split_to_target(target_m)
    return Partition(mover.assignment).canonical()


def merge_by_communities(cluster_maps: list[np.ndarray], partition: Partition,
                         ) -> list[np.ndarray]:
    """Relabel cluster maps to community labels; background becomes label 0.

    Community m maps to label m + 1 so that label 0 is reserved for
    background (unassigned or unseen cluster ids).
    """
    k = len(partition.assignment)
    lut = np.where(partition.assignment == BACKGROUND, -1, partition.assignment) + 1
    out = []
    for cm in cluster_maps:
        cm = np.asarray(cm, dtype=np.int64)
        safe = np.where(cm >= k, 0, cm)
        merged = lut[safe]
        merged[cm >= k] = 0
        out.append(merged)
    return out


# --------------------------------------------------------------------------
# text export / import

def write_graph(graph: CoocGraph, path: str | Path) -> None:
    lines = [f"nodes {graph.n}"]
    lines += [f"node {i} {int(graph.node_counts[i])}" for i in range(graph.n)]
    for i in range(graph.n):
        for j in range(i + 1, graph.n):
            if graph.weights[i, j] > 0:
                lines.append(f"{i} {j} {float(graph.weights[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path: str | Path) -> CoocGraph:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("nodes "):
        raise ValueError(f"{path}: missing node-count header")
    n = int(lines[0].split()[1])
    weights = np.zeros((n, n))
    counts = np.zeros(n, dtype=np.int64)
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "node":
            counts[int(parts[1])] = int(parts[2])
        else:
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            weights[i, j] = weights[j, i] = w
    return CoocGraph(weights=weights, node_counts=counts)


def write_partition(partition: Partition, path: str | Path) -> None:
    lines = []
    for node, comm in enumerate(partition.assignment):
        lines.append(f"{node} {'bg' if comm == BACKGROUND else int(comm)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_partition(path: str | Path) -> Partition:
    pairs = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    assignment = np.full(len(pairs), BACKGROUND, dtype=np.int64)
    for node_s, comm_s in pairs:
        if comm_s != "bg":
            assignment[int(node_s)] = int(comm_s)
    return Partition(assignment)
