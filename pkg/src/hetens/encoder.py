"""Relational message-passing encoder over sampled subgraph views.

Layer 0 projects dropped-out input features of every participating node into
the shared hidden width (one input weight per node type). Each subsequent
layer aggregates, for every relation in the group, normalized sampled sources
through that relation's layer weight, sums the relation terms, and applies the
activation. The final layer's rows are exactly the view's batch targets.
"""

from __future__ import annotations

import numpy as np

from .gradients import Node, Tape
from .hetgraph import HeterogeneousGraph
from .rng import substream
from .sampling import BatchView, ResolvedRelation


def _activate(tape: Tape, x: Node, activation: str) -> Node:
    if activation == "relu":
        return tape.relu(x)
    if activation == "identity":  # linear test hook
        return x
    raise ValueError(f"unknown activation {activation!r}")


def input_transform(tape: Tape, features: np.ndarray, weight: Node, p: float,
                    rng: np.random.Generator | None,
                    activation: str = "relu") -> Node:
    """H0 = activation(Dropout(X, p) @ W). rng may be None only when p == 0."""
    if p > 0.0 and rng is None:
        raise ValueError("dropout probability > 0 requires a generator")
    x = tape.constant(np.asarray(features, dtype=np.float64))
    if p > 0.0:
        x = tape.dropout(x, p, rng)
    return _activate(tape, tape.matmul(x, weight), activation)


def relational_layer(tape: Tape, adjacencies: dict[int, object], h_prev: Node,
                     weights: dict[int, Node], activation: str = "relu") -> Node:
    """H_next = activation(sum_j Adj_j @ H_prev @ W_j) over the group's relations."""
    if set(adjacencies) != set(weights):
        missing = set(adjacencies) ^ set(weights)
        raise KeyError(f"adjacency/weight mismatch for relations {sorted(missing)}")
    terms = [
        tape.matmul(tape.spmm(adjacencies[j], h_prev), weights[j])
        for j in sorted(adjacencies)
    ]
    return _activate(tape, tape.add_n(terms), activation)


def encode_view(tape: Tape, view: BatchView, graph: HeterogeneousGraph,
                relations: list[ResolvedRelation], params: dict[str, Node],
                hidden_dim: int, dropout: float, epoch_seed: int,
                activation: str = "relu") -> Node:
    """Run the full per-view forward; output rows align with view.target_ids.

    Dropout masks are drawn from the substream
    (epoch_seed, "dropout", group, batch size, batch index, node type), so a
    fixed epoch seed freezes them exactly (the finite-difference oracle
    depends on this).
    """
    key = view.key
    layer0 = view.layers[0]
    n0 = len(layer0)
    if n0 == 0:
        h = tape.constant(np.zeros((0, hidden_dim)))
    else:
        types = np.unique(layer0.types)
        parts = []
        for t in types:
            t = int(t)
            sel = np.flatnonzero(layer0.types == t)
            feats = graph.features[t][layer0.ids[sel]]
            name = f"input/{graph.node_type_names[t]}"
            if name not in params:
                raise KeyError(f"missing input weight for node type "
                               f"{graph.node_type_names[t]!r}")
            rng = None
            if dropout > 0.0:
                rng = substream(epoch_seed, "dropout", key.group,
                                key.batch_size, key.batch_index, t)
            block = input_transform(tape, feats, params[name], dropout, rng,
                                    activation="identity")
            if len(types) == 1:
                # homogeneous layer: rows already sit in layer order, so the
                # scatter would be an identity copy of the widest array in
                # the whole tape (layer 0 dominates node counts)
                parts.append(block)
            else:
                parts.append(tape.scatter_rows(block, sel, n0))
        h = _activate(tape, tape.add_n(parts), activation)

    num_hops = len(view.layers) - 1
    for hop in range(1, num_hops + 1):
        weights = {
            j: params[f"rel/{rel.name}/l{hop - 1}"]
            for j, rel in enumerate(relations)
        }
        h = relational_layer(tape, view.adjacencies[hop - 1], h, weights,
                             activation)
    return h


def assemble_views(tape: Tape, pairs: list[tuple[BatchView, Node]],
                   n_targets: int) -> Node:
    """Scatter per-batch target embeddings back to canonical target order.

    The batches of one (group, batch size) pass must partition the target set;
    anything else is a coverage error.
    """
    seen = np.concatenate([v.target_ids for v, _ in pairs]) if pairs else np.zeros(0, np.int64)
    if seen.shape[0] != n_targets or not np.array_equal(np.sort(seen),
                                                        np.arange(n_targets)):
        raise ValueError(
            f"batches do not partition the {n_targets} targets "
            f"(saw {seen.shape[0]} rows, {np.unique(seen).shape[0]} distinct)"
        )
    return tape.place_rows([emb for _, emb in pairs],
                           [view.target_ids for view, _ in pairs], n_targets)
