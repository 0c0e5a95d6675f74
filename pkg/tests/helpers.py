"""Shared builders and independent oracles.

The oracles here deliberately avoid the library's sparse machinery: relation
adjacency is checked against a pure-python path walk over edge lists, and the
dense forward oracle multiplies full matrices. Agreement between two
independently written routes is the point.
"""

from __future__ import annotations

import numpy as np

from hetens.hetgraph import EdgeType, HeterogeneousGraph


def build_graph(counts: dict[str, int], edge_defs: list[tuple], target: str = "a",
                num_classes: int = 2, feature_dim: int = 3, labels=None,
                splits=None, seed: int = 0) -> HeterogeneousGraph:
    """Graph from shorthand: counts by type name, edge_defs as
    (edge name, src type, dst type, undirected, [(src, dst), ...])."""
    names = list(counts)
    rng = np.random.default_rng(seed)
    features = [rng.normal(size=(counts[n], feature_dim)) for n in names]
    edge_types, edge_arrays = [], []
    for ename, s, d, und, pairs in edge_defs:
        edge_types.append(EdgeType(ename, names.index(s), names.index(d), und))
        edge_arrays.append(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    t = names.index(target)
    n_t = counts[target]
    if labels is None:
        labels = np.arange(n_t, dtype=np.int64) % num_classes
    if splits is None:
        splits = np.zeros(n_t, dtype=np.int8)
        splits[max(1, n_t - 2):] = 2
        if n_t >= 3:
            splits[n_t - 2] = 1
    return HeterogeneousGraph(
        node_type_names=names,
        node_counts=[counts[n] for n in names],
        edge_types=edge_types,
        features=features,
        edges=edge_arrays,
        target_type=t,
        num_classes=num_classes,
        labels=np.asarray(labels, dtype=np.int64),
        splits=np.asarray(splits, dtype=np.int8),
    )


def _step_moves(graph: HeterogeneousGraph, edge_type: int, reverse: bool):
    """Per-node movement sets for one path step, from raw edge lists."""
    et = graph.edge_types[edge_type]
    pairs = [tuple(p) for p in np.asarray(graph.edges[edge_type]).tolist()]
    if et.undirected and et.src_type == et.dst_type:
        pairs = pairs + [(b, a) for a, b in pairs]
    moves: dict[int, set[int]] = {}
    for a, b in pairs:
        if reverse:
            moves.setdefault(b, set()).add(a)
        else:
            moves.setdefault(a, set()).add(b)
    start = et.dst_type if reverse else et.src_type
    end = et.src_type if reverse else et.dst_type
    return moves, start, end


def enumerate_relation_dense(graph: HeterogeneousGraph,
                             steps: list[tuple[int, bool]]) -> np.ndarray:
    """Brute-force oracle: walk every path instance node by node.

    steps are (edge type index, reverse flag) pairs; the result is a dense
    boolean matrix with path end points (receivers) on rows and path start
    points (senders) on columns.
    """
    _, src_type, _ = _step_moves(graph, *steps[0])
    out_type = src_type
    step_tables = []
    for e, rev in steps:
        moves, start, end = _step_moves(graph, e, rev)
        assert start == out_type, "incompatible steps handed to the oracle"
        step_tables.append(moves)
        out_type = end
    n_src = graph.node_counts[src_type]
    n_dst = graph.node_counts[out_type]
    dense = np.zeros((n_dst, n_src), dtype=bool)
    for k in range(n_src):
        frontier = {k}
        for moves in step_tables:
            frontier = set().union(*(moves.get(u, set()) for u in frontier)) \
                if frontier else set()
        for j in frontier:
            dense[j, k] = True
    return dense


def random_hetero_graph(rng: np.random.Generator, max_nodes: int = 12,
                        max_types: int = 3):
    """Small random graph plus a random type-compatible path of 1 or 2 steps.

    Returns (graph, steps) with steps as (edge type index, reverse flag).
    """
    n_types = int(rng.integers(1, max_types + 1))
    counts = {}
    budget = max_nodes
    for t in range(n_types):
        hi = max(2, budget - (n_types - t - 1))
        c = int(rng.integers(1, hi))
        counts[f"t{t}"] = c
        budget -= c
    names = list(counts)
    n_edge_types = int(rng.integers(1, 4))
    edge_defs = []
    for e in range(n_edge_types):
        s = names[int(rng.integers(n_types))]
        d = names[int(rng.integers(n_types))]
        und = bool(rng.integers(2)) and s == d
        n_edges = int(rng.integers(0, 2 * max_nodes))
        pairs = [
            (int(rng.integers(counts[s])), int(rng.integers(counts[d])))
            for _ in range(n_edges)
        ]
        edge_defs.append((f"e{e}", s, d, und, pairs))
    graph = build_graph(counts, edge_defs, target=names[0], num_classes=2)

    def endpoints(e, rev):
        et = graph.edge_types[e]
        return (et.dst_type, et.src_type) if rev else (et.src_type, et.dst_type)

    n_steps = int(rng.integers(1, 3))
    for _ in range(200):
        steps = [(int(rng.integers(n_edge_types)), bool(rng.integers(2)))
                 for _ in range(n_steps)]
        ok = all(
            endpoints(*steps[i])[1] == endpoints(*steps[i + 1])[0]
            for i in range(n_steps - 1)
        )
        if ok:
            return graph, steps
    return graph, [(0, False)]


def dense_normalized(adjacency_dense: np.ndarray) -> np.ndarray:
    """Row-mean weights from a boolean dense matrix; empty rows stay zero."""
    deg = adjacency_dense.sum(axis=1, keepdims=True).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(deg > 0, adjacency_dense / np.maximum(deg, 1.0), 0.0)
    return out


def fd_grad(f, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g
