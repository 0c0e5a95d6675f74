"""Two-stage residual attention over aligned view embeddings.

Stage 1 fuses, per relation group, the embeddings produced under different
batch sizes; stage 2 fuses the per-group results. Both stages share the same
machinery: project each source embedding, concatenate, multiply by a score
weight to get one raw score column per source, normalize scores per column
over nodes (min-max by default, softmax as an ablation), then combine sources
with per-node weights (score + 1/k). The 1/k residual keeps every source's
fusion weight at least 1/k, so no source's gradient path can be fully shut
off by the normalizer.
"""

from __future__ import annotations

import numpy as np

from .gradients import Node, Tape


def raw_attention(tape: Tape, embeddings: list[Node], projections: list[Node],
                  score_weight: Node) -> Node:
    """Theta = [concat_j (H_j @ P_j)] @ W_score, one column per source."""
    if len(embeddings) != len(projections):
        raise ValueError(
            f"{len(embeddings)} embeddings but {len(projections)} projections"
        )
    projected = [tape.matmul(h, p) for h, p in zip(embeddings, projections)]
    theta = tape.matmul(tape.concat_cols(projected), score_weight)
    if theta.value.shape[1] != len(embeddings):
        raise ValueError(
            f"score weight produces {theta.value.shape[1]} columns for "
            f"{len(embeddings)} sources"
        )
    return theta


def normalize_scores(tape: Tape, theta: Node, kind: str) -> Node:
    if kind == "minmax":
        return tape.minmax_columns(theta)
    if kind == "softmax":
        return tape.softmax_rows(theta)
    raise ValueError(f"unknown score normalizer {kind!r}")


def fuse_views(tape: Tape, theta_norm: Node | None,
               embeddings: list[Node]) -> Node:
    """H = sum_j (theta_norm[:, j] + 1/k) * H_j, rows scaled per node.

    theta_norm=None is the naive-weighting ablation: every weight is exactly
    1/k (a plain mean of the sources).
    """
    k = len(embeddings)
    if k == 0:
        raise ValueError("cannot fuse zero sources")
    shift = 1.0 / k
    terms = []
    for j, emb in enumerate(embeddings):
        if theta_norm is None:
            weight = tape.constant(np.zeros(emb.value.shape[0]))
        else:
            weight = tape.column(theta_norm, j)
        terms.append(tape.row_scale_shift(weight, shift, emb))
    return tape.add_n(terms)
