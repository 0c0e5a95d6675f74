"""Batch planning and capped neighborhood expansion for subgraph views.

Each training epoch partitions the target nodes into batches per configured
batch size (seeded shuffle, consecutive chunks, remainder in the last batch).
For every (relation group, batch size, batch index) a BatchView is expanded:
hop sets are sampled without replacement under a per-node fanout cap, and
per-relation adjacencies are row-normalized over the sampled sources only.

Sampling decisions are keyed by
(epoch_seed, group, batch size, batch index, hop, relation, node, neighbor)
through a stateless hash, so view construction is order-independent and can
run concurrently without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hetgraph import (
    HeterogeneousGraph,
    NormalizedAdjacency,
    RelationAdjacency,
)
from .rng import fold64, mix64, substream

_PACK = np.int64(1) << np.int64(40)  # (type, id) -> type * 2^40 + id


@dataclass(frozen=True)
class ViewKey:
    group: int
    batch_size: int
    batch_index: int


@dataclass(frozen=True)
class FanoutConfig:
    """max_neighbors == 0 disables the cap; num_hops is the layer count."""

    max_neighbors: int
    num_hops: int

    def __post_init__(self):
        if self.max_neighbors < 0:
            raise ValueError("max_neighbors must be >= 0 (0 disables the cap)")
        if self.num_hops < 1:
            raise ValueError("num_hops must be >= 1")


@dataclass(frozen=True)
class ResolvedRelation:
    """A relation with its full-graph boolean adjacency (targets on rows)."""

    name: str
    src_type: int
    adjacency: RelationAdjacency


@dataclass
class LayerNodes:
    types: np.ndarray  # int64, parallel to ids
    ids: np.ndarray    # int64 local ids within each node's type

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def packed(self) -> np.ndarray:
        return self.types * _PACK + self.ids


@dataclass
class BatchView:
    key: ViewKey
    target_ids: np.ndarray
    layers: list[LayerNodes]                     # index 0..num_hops; last = targets
    sampled: list[list[tuple[np.ndarray, np.ndarray]]]
    # sampled[h][j] = (indptr over receiver rows, global source ids) for hop h+1
    adjacencies: list[dict[int, NormalizedAdjacency]] = field(default_factory=list)
    # adjacencies[h][j] maps layers[h] columns to layers[h+1] rows


@dataclass
class BatchPlan:
    epoch_seed: int
    n_targets: int
    batches: dict[int, list[np.ndarray]]

    def views(self) -> list[tuple[int, int]]:
        """(batch_size, batch_index) pairs in deterministic order."""
        out = []
        for b, chunks in self.batches.items():
            out.extend((b, k) for k in range(len(chunks)))
        return out


def plan_batches(n_targets: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Shuffle target ids and cut into ceil(n/b) consecutive chunks."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if n_targets < 1:
        raise ValueError("cannot plan batches over zero targets")
    rng = substream(epoch_seed, "plan", batch_size)
    perm = rng.permutation(n_targets).astype(np.int64)
    return [perm[i:i + batch_size] for i in range(0, n_targets, batch_size)]


def make_plan(n_targets: int, batch_sizes, epoch_seed: int) -> BatchPlan:
    if len(set(batch_sizes)) != len(tuple(batch_sizes)):
        raise ValueError("batch sizes must be distinct")
    return BatchPlan(
        epoch_seed=epoch_seed,
        n_targets=n_targets,
        batches={int(b): plan_batches(n_targets, int(b), epoch_seed)
                 for b in batch_sizes},
    )


def _sample_row(neighbors: np.ndarray, cap: int, row_key: np.uint64) -> np.ndarray:
    """Uniform sample without replacement: keep the cap smallest hash priorities."""
    if cap == 0 or neighbors.size <= cap:
        return neighbors
    with np.errstate(over="ignore"):
        prio = mix64(np.uint64(row_key) ^ mix64(neighbors.astype(np.uint64)))
    keep = np.argpartition(prio, cap - 1)[:cap]
    return np.sort(neighbors[keep])


def expand_neighborhood(
    graph: HeterogeneousGraph,
    relations: list[ResolvedRelation],
    target_batch: np.ndarray,
    fanout: FanoutConfig,
    key: ViewKey,
    epoch_seed: int,
) -> BatchView:
    """Expand a batch of targets into per-hop node sets and sampled edges.

    Hop L holds the batch targets; hop h-1 is the union over relations of each
    hop-h node's sampled sources. With num_hops >= 2 every relation must run
    target-to-target, otherwise sources would lack activations at inner layers.
    """
    L = fanout.num_hops
    target_type = graph.target_type
    if L >= 2:
        for rel in relations:
            if rel.src_type != target_type:
                raise ValueError(
                    f"relation {rel.name!r} has source type "
                    f"{graph.node_type_names[rel.src_type]!r}; stacking "
                    f"{L} layers requires target-to-target relations"
                )

    target_batch = np.asarray(target_batch, dtype=np.int64)
    layers: list[LayerNodes | None] = [None] * (L + 1)
    layers[L] = LayerNodes(
        types=np.full(target_batch.shape[0], target_type, dtype=np.int64),
        ids=target_batch,
    )
    sampled: list[list[tuple[np.ndarray, np.ndarray]]] = [None] * L  # type: ignore

    for hop in range(L, 0, -1):
        recv = layers[hop]
        per_rel = []
        union_parts = []
        for j, rel in enumerate(relations):
            base = fold64(epoch_seed, "sample", key.group, key.batch_size,
                          key.batch_index, hop, j)
            with np.errstate(over="ignore"):
                row_keys = mix64(np.uint64(base) ^ mix64(recv.ids.astype(np.uint64)))
            adj = rel.adjacency
            indptr = np.zeros(len(recv) + 1, dtype=np.int64)
            rows = []
            for r, v in enumerate(recv.ids):
                chosen = _sample_row(adj.row(int(v)), fanout.max_neighbors,
                                     row_keys[r])
                indptr[r + 1] = indptr[r] + chosen.size
                rows.append(chosen)
            flat = np.concatenate(rows) if rows else np.zeros(0, np.int64)
            per_rel.append((indptr, flat.astype(np.int64)))
            if flat.size:
                union_parts.append(np.int64(rel.src_type) * _PACK + flat)
        sampled[hop - 1] = per_rel
        if union_parts:
            packed = np.unique(np.concatenate(union_parts))
        else:
            packed = np.zeros(0, dtype=np.int64)
        layers[hop - 1] = LayerNodes(types=packed // _PACK, ids=packed % _PACK)

    view = BatchView(key=key, target_ids=target_batch, layers=layers,  # type: ignore
                     sampled=sampled)
    view.adjacencies = induce_view_adjacencies(view, relations)
    return view


def induce_view_adjacencies(
    view: BatchView, relations: list[ResolvedRelation]
) -> list[dict[int, NormalizedAdjacency]]:
    """Normalized per-relation adjacencies over sampled sources.

    Row values are 1/(number of sampled sources for that row); normalization
    happens after sampling, so capped rows renormalize over what was kept.
    """
    out: list[dict[int, NormalizedAdjacency]] = []
    for h in range(len(view.sampled)):
        src_layer = view.layers[h]
        src_packed = src_layer.packed()
        n_cols = len(src_layer)
        n_rows = len(view.layers[h + 1])
        per_rel: dict[int, NormalizedAdjacency] = {}
        for j, rel in enumerate(relations):
            indptr, flat = view.sampled[h][j]
            if flat.size:
                cols = np.searchsorted(
                    src_packed, np.int64(rel.src_type) * _PACK + flat
                ).astype(np.int64)
            else:
                cols = np.zeros(0, dtype=np.int64)
            deg = np.diff(indptr).astype(np.float64)
            values = np.repeat(
                np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0), np.diff(indptr)
            )
            per_rel[j] = NormalizedAdjacency(
                n_rows=n_rows, n_cols=n_cols,
                indptr=indptr.copy(), indices=cols, values=values,
            )
        out.append(per_rel)
    return out
