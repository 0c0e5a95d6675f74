"""Reverse-mode differentiation for the pipeline, plus gradient-flow analysis.

The tape is not a general autodiff system: it records exactly the kernel
applications this pipeline uses (products, activations, dropout, scatter and
gather, score normalizers, fusion weighting, pooling, the loss terms) together
with whatever each reverse rule needs (masks, extreme indices, saved inputs).
``backward`` replays the records in reverse creation order with a fixed
accumulation order, so gradients are bitwise reproducible.

Also here: the finite-difference oracle used to verify every gradient path,
and a single-node analyzer for how the residual term shapes gradient flow
through min-max attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nk
from .hetgraph import NormalizedAdjacency
from .rng import substream

DEGENERATE_SPAN = nk.DEGENERATE_SPAN


class Node:
    """One tape entry: a value plus per-parent pullback closures."""

    __slots__ = ("value", "grad", "requires", "parents", "pullbacks", "tag")

    def __init__(self, value, parents=(), pullbacks=(), requires=False, tag=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.pullbacks = pullbacks
        self.requires = requires
        self.tag = tag

    def __repr__(self):
        shape = getattr(self.value, "shape", "scalar")
        return f"Node({self.tag or 'op'}, {shape})"


class Tape:
    """Ordered record of kernel applications; reverse order is a valid topo order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _coerce(self, x) -> Node:
        if isinstance(x, Node):
            return x
        return self.constant(np.asarray(x, dtype=np.float64))

    def _record(self, value, parents, pullbacks, tag=None) -> Node:
        requires = any(p.requires for p in parents)
        node = Node(value, tuple(parents), tuple(pullbacks), requires, tag)
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray, tag=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), requires=True, tag=tag)
        self.nodes.append(node)
        return node

    def constant(self, value, tag=None) -> Node:
        node = Node(value, requires=False, tag=tag)
        self.nodes.append(node)
        return node

    # -- products ----------------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._coerce(a), self._coerce(b)
        value = nk.matmul(a.value, b.value)
        return self._record(
            value, (a, b),
            (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
            tag="matmul",
        )

    def spmm(self, adj: NormalizedAdjacency, h) -> Node:
        h = self._coerce(h)
        value = nk.sparse_dense_multiply(adj, h.value)
        return self._record(
            value, (h,), (lambda g: nk.sparse_dense_multiply_vjp(adj, g),),
            tag="spmm",
        )

    # -- elementwise -------------------------------------------------------

    def relu(self, x) -> Node:
        x = self._coerce(x)
        return self._record(
            nk.relu(x.value), (x,), (lambda g: nk.relu_vjp(g, x.value),), tag="relu"
        )

    def dropout(self, x, p: float, rng: np.random.Generator) -> Node:
        x = self._coerce(x)
        value, mask = nk.apply_dropout(x.value, p, rng)
        return self._record(
            value, (x,), (lambda g: nk.dropout_vjp(g, mask),), tag="dropout"
        )

    def add_n(self, terms) -> Node:
        terms = [self._coerce(t) for t in terms]
        if not terms:
            raise ValueError("add_n needs at least one term")
        if len(terms) == 1:
            return terms[0]
        value = terms[0].value.copy()
        for t in terms[1:]:
            value += t.value
        return self._record(
            value, tuple(terms), tuple(lambda g: g for _ in terms), tag="add_n"
        )

    def add_rowvec(self, h, bias) -> Node:
        h, bias = self._coerce(h), self._coerce(bias)
        return self._record(
            h.value + bias.value[None, :], (h, bias),
            (lambda g: g, lambda g: g.sum(axis=0)),
            tag="add_rowvec",
        )

    # -- shape plumbing ----------------------------------------------------

    def concat_cols(self, parts) -> Node:
        parts = [self._coerce(p) for p in parts]
        widths = [p.value.shape[1] for p in parts]
        offsets = np.concatenate([[0], np.cumsum(widths)])
        value = np.concatenate([p.value for p in parts], axis=1)

        def make(i):
            return lambda g: g[:, offsets[i]:offsets[i + 1]]

        return self._record(
            value, tuple(parts), tuple(make(i) for i in range(len(parts))),
            tag="concat_cols",
        )

    def gather_rows(self, h, idx: np.ndarray) -> Node:
        h = self._coerce(h)
        idx = np.asarray(idx, dtype=np.int64)
        n = h.value.shape[0]

        def pull(g):
            out = np.zeros((n, g.shape[1]), dtype=np.float64)
            np.add.at(out, idx, g)
            return out

        return self._record(h.value[idx], (h,), (pull,), tag="gather_rows")

    def scatter_rows(self, h, positions: np.ndarray, n_rows: int) -> Node:
        h = self._coerce(h)
        positions = np.asarray(positions, dtype=np.int64)
        value = np.zeros((n_rows, h.value.shape[1]), dtype=np.float64)
        value[positions] = h.value
        return self._record(
            value, (h,), (lambda g: g[positions],), tag="scatter_rows"
        )

    def place_rows(self, blocks, positions_list, n_rows: int) -> Node:
        """Place row blocks with disjoint destinations into one matrix.

        Equivalent to scattering each block and summing, but builds a single
        output instead of one full-size matrix per block. Callers guarantee
        the position arrays are disjoint; uncovered rows stay zero.
        """
        blocks = [self._coerce(b) for b in blocks]
        if not blocks:
            raise ValueError("place_rows needs at least one block")
        value = np.zeros((n_rows, blocks[0].value.shape[1]), dtype=np.float64)
        pulls = []
        for block, positions in zip(blocks, positions_list):
            positions = np.asarray(positions, dtype=np.int64)
            value[positions] = block.value
            pulls.append(lambda g, p=positions: g[p])
        return self._record(value, tuple(blocks), tuple(pulls),
                            tag="place_rows")

    def stack_rows(self, vectors) -> Node:
        vectors = [self._coerce(v) for v in vectors]
        value = np.stack([v.value for v in vectors], axis=0)

        def make(i):
            return lambda g: g[i]

        return self._record(
            value, tuple(vectors), tuple(make(i) for i in range(len(vectors))),
            tag="stack_rows",
        )

    def column(self, theta, j: int) -> Node:
        theta = self._coerce(theta)
        m = theta.value.shape[1]

        def pull(g):
            out = np.zeros((g.shape[0], m), dtype=np.float64)
            out[:, j] = g
            return out

        return self._record(theta.value[:, j].copy(), (theta,), (pull,), tag="column")

    # -- reductions and normalizers ----------------------------------------

    def mean_pool(self, h) -> Node:
        h = self._coerce(h)
        n = h.value.shape[0]
        return self._record(
            nk.mean_pool_rows(h.value), (h,),
            (lambda g: nk.mean_pool_rows_vjp(g, n),), tag="mean_pool"
        )

    def minmax_columns(self, theta) -> Node:
        theta = self._coerce(theta)
        value, rec = nk.column_minmax_normalize(theta.value)
        return self._record(
            value, (theta,), (lambda g: nk.column_minmax_vjp(g, value, rec),),
            tag="minmax_columns",
        )

    def softmax_rows(self, theta) -> Node:
        theta = self._coerce(theta)
        value = nk.softmax_rows(theta.value)
        return self._record(
            value, (theta,), (lambda g: nk.softmax_rows_vjp(g, value),),
            tag="softmax_rows",
        )

    def row_scale_shift(self, w, shift: float, h) -> Node:
        w, h = self._coerce(w), self._coerce(h)
        value = nk.row_scale_shift(w.value, shift, h.value)
        return self._record(
            value, (w, h),
            (lambda g: (g * h.value).sum(axis=1),
             lambda g: (w.value + shift)[:, None] * g),
            tag="row_scale_shift",
        )

    def gram(self, h) -> Node:
        h = self._coerce(h)
        return self._record(
            nk.gram(h.value), (h,), (lambda g: nk.gram_vjp(g, h.value),), tag="gram"
        )

    # -- scalars -----------------------------------------------------------

    def l1(self, s, exclude_diag: bool = False) -> Node:
        s = self._coerce(s)
        return self._record(
            nk.elementwise_l1(s.value, exclude_diag), (s,),
            (lambda g: nk.elementwise_l1_vjp(g, s.value, exclude_diag),), tag="l1"
        )

    def cross_entropy(self, logits, labels: np.ndarray, rows: np.ndarray) -> Node:
        logits = self._coerce(logits)
        labels = np.asarray(labels, dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64)
        loss, probs = nk.masked_mean_cross_entropy(logits.value, labels, rows)
        n_total = logits.value.shape[0]
        return self._record(
            loss, (logits,),
            (lambda g: nk.masked_mean_cross_entropy_vjp(g, probs, labels, rows, n_total),),
            tag="cross_entropy",
        )

    def affine_scalars(self, a, b, coeff: float) -> Node:
        """a + coeff * b for scalar nodes."""
        a, b = self._coerce(a), self._coerce(b)
        return self._record(
            float(a.value) + coeff * float(b.value), (a, b),
            (lambda g: g, lambda g: g * coeff), tag="affine_scalars"
        )

    # -- reverse sweep -----------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape in reverse order.

        Interior gradients and pullback closures are released as soon as a
        node has pushed its gradient to its parents; on large epochs they are
        the bulk of peak memory. Leaf gradients survive the sweep.
        """
        if not np.isscalar(loss.value) and getattr(loss.value, "shape", None) != ():
            raise ValueError("backward expects a scalar loss node")
        loss.grad = 1.0
        for node in reversed(self.nodes):
            if node.grad is None or not node.requires:
                continue
            for parent, pull in zip(node.parents, node.pullbacks):
                if not parent.requires:
                    continue
                g = pull(node.grad)
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64) if not np.isscalar(g) else float(g)
                else:
                    parent.grad = parent.grad + g
            if node.parents:
                node.grad = None
                node.pullbacks = ()


def backward(loss: Node, tape: Tape, params: dict[str, Node]) -> dict[str, np.ndarray]:
    """Run the reverse sweep and collect per-parameter gradients.

    Parameters the loss never touched get exact zero gradients of the right
    shape.
    """
    tape.backward(loss)
    out = {}
    for name, node in params.items():
        if node.grad is None:
            out[name] = np.zeros_like(node.value)
        else:
            out[name] = np.asarray(node.grad, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# Finite-difference oracle

class DegenerateAttentionError(RuntimeError):
    """An attention column is degenerate or has tied extremes; reseed the model."""


@dataclass
class FiniteDiffReport:
    eps: float
    tol: float
    per_param: dict[str, dict]
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "tol": self.tol,
            "max_rel_err": self.max_rel_err,
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index),
            "passed": self.passed,
            "per_param": self.per_param,
        }


def finite_diff_check(loss_and_grads, params: dict[str, np.ndarray],
                      eps: float = 1e-5, tol: float = 1e-4,
                      param_filter=None) -> FiniteDiffReport:
    """Compare analytic gradients to central finite differences.

    ``loss_and_grads(params, need_grads)`` must rebuild the loss from scratch
    with frozen randomness (same masks, same sampled views) and return
    ``(loss, grads_or_None)``. Relative error per entry is
    |analytic - numeric| / max(1e-8, |numeric|); the report carries the
    per-parameter maxima and the global argmax.
    """
    _, grads = loss_and_grads(params, True)
    names = sorted(params)
    if param_filter is not None:
        names = [n for n in names if param_filter(n)]
    per_param: dict[str, dict] = {}
    worst = (-1.0, "", (0,))
    work = {k: v.copy() for k, v in params.items()}
    for name in names:
        flat = work[name].reshape(-1)
        analytic = grads[name].reshape(-1)
        rel = np.zeros_like(flat)
        numeric = np.zeros_like(flat)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss_and_grads(work, False)
            flat[i] = orig - eps
            down, _ = loss_and_grads(work, False)
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            numeric[i] = num
            rel[i] = abs(analytic[i] - num) / max(1e-8, abs(num))
        arg = int(np.argmax(rel))
        shape = params[name].shape
        per_param[name] = {
            "max_rel_err": float(rel[arg]),
            "argmax": list(np.unravel_index(arg, shape)),
            "analytic": float(analytic[arg]),
            "numeric": float(numeric[arg]),
        }
        if rel[arg] > worst[0]:
            worst = (float(rel[arg]), name, tuple(np.unravel_index(arg, shape)))
    return FiniteDiffReport(
        eps=eps, tol=tol, per_param=per_param,
        max_rel_err=worst[0], worst_param=worst[1], worst_index=worst[2],
        passed=worst[0] < tol,
    )


# ---------------------------------------------------------------------------
# Single-node gradient-flow analyzer
#
# One node receives k source embeddings h_1..h_k. Raw scores are
# theta_j = sum_q (h_q W_q) . wp[block q, column j], normalized by min-max over
# the k entries, and fused as h_f = sum_j (theta_norm_j + rho) h_j with
# rho = 1/k when the residual is on. The analyzer returns the exact Jacobians
# d h_f / d h_i; subtracting the score mean first cancels (the normalizer is
# shift-invariant) so it does not appear in the algebra.

def _single_node_scores(h_list, w_list, w_prime):
    k = len(h_list)
    dp = w_list[0].shape[1]
    if w_prime.shape != (k * dp, k):
        raise ValueError(
            f"score weight must be ({k * dp}, {k}), got {w_prime.shape}"
        )
    z = np.concatenate([h_list[i] @ w_list[i] for i in range(k)])
    return z @ w_prime


def fused_single_node(h_list, w_list, w_prime, with_residual: bool) -> np.ndarray:
    """Forward fusion for one node; the finite-difference oracle differentiates this."""
    k = len(h_list)
    rho = 1.0 / k if with_residual else 0.0
    theta = _single_node_scores(h_list, w_list, w_prime)
    span = theta.max() - theta.min()
    if k == 1 or span < DEGENERATE_SPAN:
        tnorm = np.zeros(k)
    else:
        tnorm = (theta - theta[np.argmin(theta)]) / span
    out = np.zeros_like(h_list[0])
    for j in range(k):
        out = out + (tnorm[j] + rho) * h_list[j]
    return out


def intermediate_gradient(h_list, w_list, w_prime, with_residual: bool):
    """Exact Jacobians d h_f / d h_i for every source i (convention:
    M[p, q] = d h_f[q] / d h_i[p]).

    Three pieces per source: the direct term theta_norm_i * I, the score path
    sum_j outer(d theta_norm_j / d h_i, h_j) routed through the min-max
    extremes, and the residual (1/k) * I when enabled. k == 1 is the
    degenerate column: scores contribute nothing and the result is rho * I.
    """
    k = len(h_list)
    if k < 1:
        raise ValueError("need at least one source")
    h_list = [np.asarray(h, dtype=np.float64) for h in h_list]
    w_list = [np.asarray(w, dtype=np.float64) for w in w_list]
    w_prime = np.asarray(w_prime, dtype=np.float64)
    d = h_list[0].shape[0]
    dp = w_list[0].shape[1]
    rho = 1.0 / k if with_residual else 0.0
    eye = np.eye(d)

    if k == 1:
        return [rho * eye]

    theta = _single_node_scores(h_list, w_list, w_prime)
    lo = int(np.argmin(theta))
    hi = int(np.argmax(theta))
    span = theta[hi] - theta[lo]
    if span < DEGENERATE_SPAN:
        raise ValueError(
            f"degenerate raw-score spread {span:.3e}; min-max normalization "
            f"is not differentiable here"
        )
    tnorm = (theta - theta[lo]) / span

    # c[j, t] = d theta_norm_j / d theta_t
    c = np.zeros((k, k))
    c[np.arange(k), np.arange(k)] += 1.0 / span
    c[:, lo] -= 1.0 / span
    c[:, hi] -= tnorm / span
    c[:, lo] += tnorm / span

    big_h = np.stack(h_list, axis=0)  # (k, d)
    out = []
    for i in range(k):
        g_i = w_list[i] @ w_prime[i * dp:(i + 1) * dp, :]  # (d, k), col t = d theta_t / d h_i
        a_i = g_i @ c.T                                    # (d, k), col j = d theta_norm_j / d h_i
        out.append((tnorm[i] + rho) * eye + a_i @ big_h)
    return out


@dataclass
class GradFlowReport:
    k: int
    spread: float
    theta: np.ndarray
    theta_norm: np.ndarray
    min_source: int
    with_residual_norms: list[float]
    without_residual_norms: list[float]
    residual_identity_dev: float
    bound_h: float
    bound_w: float
    bound_w_prime: float
    scenario: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "spread": self.spread,
            "theta": [float(t) for t in self.theta],
            "theta_norm": [float(t) for t in self.theta_norm],
            "min_source": self.min_source,
            "with_residual_norms": self.with_residual_norms,
            "without_residual_norms": self.without_residual_norms,
            "residual_identity_dev": self.residual_identity_dev,
            "bound_h": self.bound_h,
            "bound_w": self.bound_w,
            "bound_w_prime": self.bound_w_prime,
        }


def vanishing_scenario(k: int, spread: float, seed: int = 97) -> GradFlowReport:
    """Build a configuration whose minimum-attention source has raw score 0 and
    whose raw spread is exactly ``spread``, then report gradient norms.

    The analyzed source's own projection and score rows stay O(1); the spread
    is carried by the other sources' score rows (one row is solved so the raw
    scores hit the requested values exactly). Because the normalized scores
    are then independent of ``spread``, the score-path term scales exactly as
    1/spread, and a sign flip on the analyzed source's score row keeps the
    trace of that term nonnegative so the with-residual spectral norm is
    provably >= 1/k.
    """
    if k < 2:
        raise ValueError("vanishing scenario needs k >= 2")
    if spread <= 0:
        raise ValueError("spread must be positive")
    d, dp = 4, 2
    rng = substream(seed, "vanish", k)
    h_list = []
    for _ in range(k):
        v = rng.normal(size=d)
        h_list.append(v / np.linalg.norm(v))
    w_list = [rng.uniform(-0.7, 0.7, size=(d, dp)) for _ in range(k)]
    z1 = h_list[1] @ w_list[1]
    while np.linalg.norm(z1) < 0.3:
        w_list[1] = rng.uniform(-0.7, 0.7, size=(d, dp))
        z1 = h_list[1] @ w_list[1]

    targets = spread * np.linspace(0.0, 1.0, k)  # source 0 is the minimum

    def build(flip_row0: bool):
        wp = np.zeros((k * dp, k))
        for q in range(k):
            if q == 1:
                continue
            block = rng_blocks[q]
            wp[q * dp:(q + 1) * dp, :] = -block if (q == 0 and flip_row0) else block
        # solve block row 1 so that theta == targets exactly
        resid = targets.copy()
        for q in range(k):
            if q == 1:
                continue
            zq = h_list[q] @ w_list[q]
            resid = resid - zq @ wp[q * dp:(q + 1) * dp, :]
        wp[1 * dp:2 * dp, :] = np.outer(z1, resid) / float(z1 @ z1)
        return wp

    rng_blocks = {q: rng.uniform(-0.4, 0.4, size=(dp, k)) for q in range(k) if q != 1}
    wp = build(flip_row0=False)
    without = intermediate_gradient(h_list, w_list, wp, with_residual=False)
    if np.trace(without[0]) < 0.0:
        wp = build(flip_row0=True)
        without = intermediate_gradient(h_list, w_list, wp, with_residual=False)
    withr = intermediate_gradient(h_list, w_list, wp, with_residual=True)

    theta = _single_node_scores(h_list, w_list, wp)
    if not np.allclose(theta, targets, rtol=1e-9, atol=1e-9 * max(1.0, spread)):
        raise AssertionError("scenario construction failed to hit target scores")
    span = theta.max() - theta.min()
    tnorm = (theta - theta.min()) / span
    dev = max(
        float(np.abs((wi - wo) - np.eye(d) / k).max())
        for wi, wo in zip(withr, without)
    )
    return GradFlowReport(
        k=k,
        spread=float(span),
        theta=theta,
        theta_norm=tnorm,
        min_source=int(np.argmin(theta)),
        with_residual_norms=[float(np.linalg.norm(m, 2)) for m in withr],
        without_residual_norms=[float(np.linalg.norm(m, 2)) for m in without],
        residual_identity_dev=dev,
        bound_h=float(max(np.abs(h).max() for h in h_list)),
        bound_w=float(max(np.abs(w).max() for w in w_list)),
        bound_w_prime=float(np.abs(wp).max()),
        scenario={"h": h_list, "w": w_list, "w_prime": wp},
    )
