"""Learning the expert group structure.

Pipeline: (1) scan the panel for conditional-stability violations — ordered
expert pairs whose observed disagreement is impossible under shared noise;
(2) keep the co-observed, violation-free pairs as graph edges and weight
each edge by how much pairing the two experts changes held-in prediction
loss versus treating them independently; (3) cover the graph with cliques
of non-positive total weight via randomized greedy growth with restarts.
An exact enumerator over all clique covers doubles as a test oracle for
small graphs.

The violation test for ordered pair (source h with label c, target h' with
label c'), c != c': flag iff

    p_h'(c) / p_h(c)  >=  slack * p_h'(c') / p_h(c')

on that sample's features.  Under shared Gumbel noise such an outcome has
probability zero, so one occurrence rules the pair out.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import PanelArrays, PanelDataset
from .errors import (
    GraphTooLargeError,
    InvalidArgumentError,
    InvalidEdgeError,
    MissingExpertError,
    NotACliqueCoverError,
)
from .models import ConditionalModel
from .rng import ordered_map
from .scm import posterior_noise_from_uniforms
from .types import EPSILON_PROB, ExpertId, Label, Partition

Edge = tuple[ExpertId, ExpertId]

WEIGHT_LOSSES = ("zero_one", "nll")


def _canonical_edge(a: ExpertId, b: ExpertId) -> Edge:
    if a == b:
        raise InvalidArgumentError(f"self-edge on expert {a!r}")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class ViolationRecord:
    """One observed outcome incompatible with shared noise for (source, target)."""

    sample_id: str
    source: ExpertId
    target: ExpertId
    source_label: Label
    target_label: Label
    ratio_lhs: float  # p_target(source_label) / p_source(source_label)
    ratio_rhs: float  # p_target(target_label) / p_source(target_label)


@dataclass(frozen=True)
class SimilarityGraph:
    """Undirected graph over experts; edges carry loss-difference weights.

    Only permissible (co-observed, violation-free) pairs appear as edges;
    any absent pair is an implicit +infinity — groups may never span it.
    """

    vertices: tuple[ExpertId, ...]
    weights: Mapping[Edge, float]
    co_observations: Mapping[Edge, int] = None  # type: ignore[assignment]
    _adjacency: Mapping[ExpertId, dict[ExpertId, float]] = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.co_observations is None:
            object.__setattr__(self, "co_observations", {e: 1 for e in self.weights})
        vertices = tuple(sorted(dict.fromkeys(self.vertices)))
        if len(vertices) != len(tuple(self.vertices)):
            raise InvalidArgumentError("duplicate vertices")
        vset = set(vertices)
        weights: dict[Edge, float] = {}
        adjacency: dict[ExpertId, dict[ExpertId, float]] = {v: {} for v in vertices}
        for (a, b), w in self.weights.items():
            edge = _canonical_edge(a, b)
            if edge[0] not in vset or edge[1] not in vset:
                raise InvalidArgumentError(f"edge {edge} references unknown vertices")
            if edge in weights:
                raise InvalidArgumentError(f"duplicate edge {edge}")
            w = float(w)
            if not np.isfinite(w):
                raise InvalidArgumentError(f"edge {edge} has non-finite weight {w!r}")
            weights[edge] = w
            adjacency[edge[0]][edge[1]] = w
            adjacency[edge[1]][edge[0]] = w
        co = {}
        for (a, b), c in self.co_observations.items():
            edge = _canonical_edge(a, b)
            if edge not in weights:
                raise InvalidArgumentError(f"co-observation count for non-edge {edge}")
            co[edge] = int(c)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "co_observations", co)
        object.__setattr__(self, "_adjacency", adjacency)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edges(self) -> tuple[Edge, ...]:
        return tuple(sorted(self.weights))

    def has_edge(self, a: ExpertId, b: ExpertId) -> bool:
        return _canonical_edge(a, b) in self.weights

    def weight(self, a: ExpertId, b: ExpertId) -> float:
        edge = _canonical_edge(a, b)
        try:
            return self.weights[edge]
        except KeyError:
            raise InvalidArgumentError(f"no edge between {a!r} and {b!r}") from None

    def neighbors(self, v: ExpertId) -> dict[ExpertId, float]:
        try:
            return dict(self._adjacency[v])
        except KeyError:
            raise MissingExpertError(f"vertex {v!r} is not in the graph") from None


def _prediction_cube(
    arrays: PanelArrays, models: Mapping[ExpertId, ConditionalModel]
) -> np.ndarray:
    """Floored model probabilities, shape (H, n, k)."""
    for h in arrays.experts:
        if h not in models:
            raise MissingExpertError(f"no model for expert {h!r}")
    per_expert = [models[h].predict_batch(arrays.X) for h in arrays.experts]
    return np.stack(per_expert, axis=0)


def detect_violations(
    dataset: PanelDataset,
    models: Mapping[ExpertId, ConditionalModel],
    slack: float = 1.0,
) -> tuple[list[ViolationRecord], set[Edge]]:
    """Scan all co-observed ordered pairs; return (violations, permissible edges).

    Permissible edges are the unordered co-observed pairs with no violation
    in either ordering.  ``slack`` multiplies the right-hand ratio: values
    above 1 demand stronger evidence before ruling a pair out (probabilities
    are estimates, not truths).
    """
    if not slack > 0:
        raise InvalidArgumentError(f"slack must be positive, got {slack!r}")
    arrays = PanelArrays.from_dataset(dataset)
    probs = _prediction_cube(arrays, models)
    H = len(arrays.experts)
    co_counts = np.zeros((H, H), dtype=np.int64)
    violated = np.zeros((H, H), dtype=bool)  # violated[s, t]: ordered (source s, target t)
    records: list[ViolationRecord] = []

    for i in range(arrays.labels.shape[0]):
        obs = np.flatnonzero(arrays.labels[i] >= 0)
        if obs.size < 2:
            continue
        co_counts[np.ix_(obs, obs)] += 1
        labs = arrays.labels[i, obs]
        a_pos, b_pos = np.triu_indices(obs.size, k=1)
        differ = labs[a_pos] != labs[b_pos]
        if not differ.any():
            continue
        a_pos, b_pos = a_pos[differ], b_pos[differ]
        pi = probs[obs, i, :]  # (n_obs, k)
        ca, cb = labs[a_pos], labs[b_pos]
        for src, tgt, c_src, c_tgt in ((a_pos, b_pos, ca, cb), (b_pos, a_pos, cb, ca)):
            lhs = pi[tgt, c_src] / pi[src, c_src]
            rhs = pi[tgt, c_tgt] / pi[src, c_tgt]
            hit = lhs >= slack * rhs
            if not hit.any():
                continue
            for j in np.flatnonzero(hit):
                s_idx, t_idx = obs[src[j]], obs[tgt[j]]
                violated[s_idx, t_idx] = True
                records.append(
                    ViolationRecord(
                        sample_id=arrays.sample_ids[i],
                        source=arrays.experts[s_idx],
                        target=arrays.experts[t_idx],
                        source_label=int(c_src[j]),
                        target_label=int(c_tgt[j]),
                        ratio_lhs=float(lhs[j]),
                        ratio_rhs=float(rhs[j]),
                    )
                )

    permissible: set[Edge] = set()
    for p in range(H):
        for q in range(p + 1, H):
            if co_counts[p, q] >= 1 and not (violated[p, q] or violated[q, p]):
                permissible.add((arrays.experts[p], arrays.experts[q]))
    return records, permissible


def write_violations_csv(records: Sequence[ViolationRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "source", "target", "source_label", "target_label", "ratio_lhs", "ratio_rhs"]
        )
        for r in records:
            writer.writerow(
                [r.sample_id, r.source, r.target, r.source_label, r.target_label,
                 repr(r.ratio_lhs), repr(r.ratio_rhs)]
            )


def compute_edge_weights(
    edges: Iterable[Edge],
    dataset: PanelDataset,
    models: Mapping[ExpertId, ConditionalModel],
    t_weights: int,
    rng: np.random.Generator,
    loss: str = "zero_one",
    threads: int = 1,
) -> SimilarityGraph:
    """Weight each edge by the empirical cost of pairing its endpoints.

    For each direction (source, target) of an edge and each co-observed
    training sample, estimate the target's counterfactual distribution under
    shared noise (``t_weights`` posterior draws) and compare the loss of its
    argmax against the loss of the target's plain model argmax (which is the
    counterfactual under all-singleton grouping).  The edge weight is the sum
    of the two directional mean-loss differences; negative means pairing
    helped.  Loss is 0/1 by default, ``"nll"`` scores the estimated
    probability of the true label instead.

    One random substream per (edge, sample, direction) task, assigned in
    canonical order before any parallel dispatch — thread count cannot change
    results.
    """
    if not isinstance(t_weights, (int, np.integer)) or t_weights < 1:
        raise InvalidArgumentError(f"t_weights must be a positive int, got {t_weights!r}")
    if loss not in WEIGHT_LOSSES:
        raise InvalidArgumentError(f"loss must be one of {WEIGHT_LOSSES}, got {loss!r}")
    edge_list = sorted({_canonical_edge(a, b) for a, b in edges})
    arrays = PanelArrays.from_dataset(dataset)
    probs = _prediction_cube(arrays, models)
    log_probs = np.log(probs)
    T = int(t_weights)

    co_idx: list[np.ndarray] = []
    for a, b in edge_list:
        ja, jb = arrays.expert_index[a], arrays.expert_index[b]
        idx = np.flatnonzero((arrays.labels[:, ja] >= 0) & (arrays.labels[:, jb] >= 0))
        if idx.size == 0:
            raise InvalidEdgeError(f"experts {a!r} and {b!r} were never co-observed")
        co_idx.append(idx)

    # One stream per (edge, sample, direction), reserved up front in canonical
    # order so the assignment is independent of scheduling.
    streams = rng.spawn(sum(2 * idx.size for idx in co_idx))
    offsets = np.cumsum([0] + [2 * idx.size for idx in co_idx])

    def edge_weight(e: int) -> tuple[float, int]:
        a, b = edge_list[e]
        idx = co_idx[e]
        n_e = idx.size
        block = streams[offsets[e] : offsets[e + 1]]
        total = 0.0
        for direction, (src, tgt) in enumerate(((a, b), (b, a))):
            js, jt = arrays.expert_index[src], arrays.expert_index[tgt]
            phi_src = log_probs[js, idx, :]
            observed = arrays.labels[idx, js]
            true_t = arrays.labels[idx, jt]
            m_u = np.empty((T, n_e))
            u = np.empty((T, n_e, phi_src.shape[1]))
            for s in range(n_e):
                stream = block[direction * n_e + s]
                m_u[:, s] = stream.random(T)
                u[:, s, :] = stream.random((T, phi_src.shape[1]))
            noise = posterior_noise_from_uniforms(phi_src, observed, m_u, u)
            cf_labels = np.argmax(log_probs[jt, idx, :][None, :, :] + noise, axis=2)  # (T, n_e)
            k = phi_src.shape[1]
            hist = np.bincount(
                (cf_labels + k * np.arange(n_e)[None, :]).ravel(), minlength=n_e * k
            ).reshape(n_e, k)
            if loss == "zero_one":
                shared = float(np.mean(np.argmax(hist, axis=1) != true_t))
                base = float(np.mean(np.argmax(probs[jt, idx, :], axis=1) != true_t))
            else:
                rows = np.arange(n_e)
                shared = float(np.mean(-np.log(np.maximum(hist[rows, true_t] / T, EPSILON_PROB))))
                base = float(np.mean(-np.log(probs[jt, idx, :][rows, true_t])))
            total += shared - base
        return total, idx.size

    results = ordered_map(edge_weight, range(len(edge_list)), threads=threads)
    weights = {edge_list[e]: results[e][0] for e in range(len(edge_list))}
    co = {edge_list[e]: results[e][1] for e in range(len(edge_list))}
    return SimilarityGraph(vertices=arrays.experts, weights=weights, co_observations=co)


def greedy_partition(graph: SimilarityGraph, rng: np.random.Generator) -> Partition:
    """Randomized greedy clique growth.

    Repeat until no vertices remain: start a clique at a uniformly random
    remaining vertex; among remaining vertices adjacent to every clique
    member, add the one with the smallest summed weight to the clique
    (smallest id on ties) while that sum is <= 0; then close the clique.
    """
    if graph.n_vertices == 0:
        raise InvalidArgumentError("graph has no vertices")
    remaining = list(graph.vertices)  # sorted already
    remaining_set = set(remaining)
    groups: list[list[ExpertId]] = []
    while remaining:
        start = remaining[int(rng.integers(len(remaining)))]
        clique = [start]
        remaining.remove(start)
        remaining_set.remove(start)
        sums = {u: w for u, w in graph.neighbors(start).items() if u in remaining_set}
        while sums:
            best = min(sums.items(), key=lambda kv: (kv[1], kv[0]))[0]
            if sums[best] > 0:
                break
            clique.append(best)
            remaining.remove(best)
            remaining_set.remove(best)
            best_adj = graph.neighbors(best)
            sums = {u: s + best_adj[u] for u, s in sums.items() if u != best and u in best_adj}
        groups.append(clique)
    return Partition.from_groups(groups)


def objective(partition: Partition, graph: SimilarityGraph) -> float:
    """Total within-group edge weight; the quantity the partition search minimizes."""
    if set(partition.experts) != set(graph.vertices):
        raise InvalidArgumentError("partition must cover exactly the graph's vertices")
    total = 0.0
    for group in partition.groups:
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                if not graph.has_edge(group[i], group[j]):
                    raise NotACliqueCoverError(
                        f"experts {group[i]!r} and {group[j]!r} share a group but have no edge"
                    )
                total += graph.weight(group[i], group[j])
    return total


def partition_with_restarts(
    graph: SimilarityGraph,
    restarts: int,
    rng: np.random.Generator,
) -> Partition:
    """Best of ``restarts`` greedy runs (earliest run wins ties)."""
    if not isinstance(restarts, (int, np.integer)) or restarts < 1:
        raise InvalidArgumentError(f"restarts must be a positive int, got {restarts!r}")
    best: Partition | None = None
    best_obj = np.inf
    for stream in rng.spawn(int(restarts)):
        candidate = greedy_partition(graph, stream)
        obj = objective(candidate, graph)
        if obj < best_obj:
            best, best_obj = candidate, obj
    assert best is not None
    return best


BRUTE_FORCE_MAX_VERTICES = 12


def brute_force_partition(graph: SimilarityGraph) -> Partition:
    """Exact minimizer of :func:`objective` over all clique covers.

    Enumerates set partitions in restricted-growth order, pruning blocks the
    next vertex is not fully adjacent to; first minimizer found wins ties.
    Exponential — refuses graphs beyond 12 vertices.
    """
    n = graph.n_vertices
    if n == 0:
        raise InvalidArgumentError("graph has no vertices")
    if n > BRUTE_FORCE_MAX_VERTICES:
        raise GraphTooLargeError(f"{n} vertices exceeds the exact-search limit of {BRUTE_FORCE_MAX_VERTICES}")
    vertices = graph.vertices
    adj = [graph.neighbors(v) for v in vertices]

    best_groups: list[list[int]] | None = None
    best_obj = np.inf
    blocks: list[list[int]] = []

    def recurse(i: int, obj: float) -> None:
        nonlocal best_groups, best_obj
        if i == n:
            if obj < best_obj:
                best_obj = obj
                best_groups = [list(b) for b in blocks]
            return
        v = vertices[i]
        for block in blocks:
            if all(vertices[m] in adj[i] for m in block):
                added = sum(adj[i][vertices[m]] for m in block)
                block.append(i)
                recurse(i + 1, obj + added)
                block.pop()
        blocks.append([i])
        recurse(i + 1, obj)
        blocks.pop()

    recurse(0, 0.0)
    assert best_groups is not None
    return Partition.from_groups([[vertices[m] for m in group] for group in best_groups])
