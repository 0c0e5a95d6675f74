"""Classification head, view-diversity penalty, and the training objective.

The loss is mean cross-entropy over the training targets plus
lambda * ||S||_1, where S is the Gram matrix of mean-pooled aligned view
embeddings (one row per (group, batch size) view, group-major). Pushing
off-diagonal similarity toward zero keeps the ensemble's views from
collapsing onto one representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import Node, Tape


def mlp_predict(tape: Tape, h: Node, params: dict[str, Node]) -> Node:
    """logits = ReLU(H @ W1 + b1) @ W2 + b2."""
    hidden = tape.relu(tape.add_rowvec(tape.matmul(h, params["mlp/W1"]),
                                       params["mlp/b1"]))
    return tape.add_rowvec(tape.matmul(hidden, params["mlp/W2"]),
                           params["mlp/b2"])


def diversity_matrix(tape: Tape, aligned_views: list[Node]) -> tuple[Node, Node]:
    """S = H~ @ H~^T with one mean-pooled row per aligned view embedding.

    Row order must be group-major, batch-size-minor; callers pass the views in
    that order. Returns (S, H~).
    """
    if not aligned_views:
        raise ValueError("diversity matrix needs at least one view")
    pooled = tape.stack_rows([tape.mean_pool(h) for h in aligned_views])
    return tape.gram(pooled), pooled


@dataclass
class LossBreakdown:
    cross_entropy: float
    diversity: float
    reg_lambda: float

    @property
    def total(self) -> float:
        return self.cross_entropy + self.reg_lambda * self.diversity


def total_loss(tape: Tape, logits: Node, labels: np.ndarray,
               train_rows: np.ndarray, similarity: Node | None,
               reg_lambda: float,
               exclude_diag: bool = False) -> tuple[Node, LossBreakdown]:
    """Combine the two objective terms; similarity=None drops the regularizer."""
    ce = tape.cross_entropy(logits, labels, train_rows)
    if similarity is None or reg_lambda == 0.0:
        div = tape.l1(similarity, exclude_diag) if similarity is not None else None
        breakdown = LossBreakdown(float(ce.value),
                                  float(div.value) if div is not None else 0.0,
                                  0.0)
        return ce, breakdown
    div = tape.l1(similarity, exclude_diag)
    loss = tape.affine_scalars(ce, div, reg_lambda)
    return loss, LossBreakdown(float(ce.value), float(div.value), reg_lambda)


def accuracy(logits: np.ndarray, labels: np.ndarray, rows: np.ndarray) -> float:
    """Fraction of rows whose argmax (first index on ties) matches the label."""
    if rows.shape[0] == 0:
        raise ValueError("accuracy over an empty split")
    pred = np.argmax(logits[rows], axis=1)
    return float(np.mean(pred == labels[rows]))
