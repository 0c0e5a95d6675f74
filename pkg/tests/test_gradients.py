"""Reverse-mode tape: pullback routing, accumulation, and the FD harness."""

import numpy as np
import pytest

from hetens.gradients import (
    FiniteDiffReport,
    Tape,
    backward,
    finite_diff_check,
)
from hetens.hetgraph import RelationAdjacency, normalize_adjacency
from hetens.numerics import masked_mean_cross_entropy

from helpers import fd_grad


def small_adjacency():
    # 5x4, two empty rows exercise the zero-fill path
    indptr = np.array([0, 2, 2, 4, 5, 5], dtype=np.int64)
    cols = np.array([0, 3, 1, 2, 0], dtype=np.int64)
    return normalize_adjacency(RelationAdjacency(5, 4, indptr, cols))


def grads_and_value(build, values):
    """Run build() once on leaves for gradients, once on constants for the value."""
    tape = Tape()
    nodes = {k: tape.leaf(v.copy(), tag=k) for k, v in values.items()}
    loss = build(tape, nodes)
    grads = backward(loss, tape, nodes)

    def value_at(vals):
        t = Tape()
        ns = {k: t.constant(v) for k, v in vals.items()}
        return float(build(t, ns).value)

    return grads, value_at


def assert_tape_matches_fd(build, values, rtol=1e-5, atol=1e-8):
    grads, value_at = grads_and_value(build, values)
    work = {k: v.copy() for k, v in values.items()}
    for name in values:
        def f(x, _name=name):
            work[_name] = x
            return value_at(work)

        num = fd_grad(f, values[name].copy())
        work[name] = values[name].copy()
        assert np.allclose(grads[name], num, rtol=rtol, atol=atol), name


class TestStructuralOps:
    """Index bookkeeping of gather/scatter/concat/stack/column."""

    def test_gather_accumulates_repeated_rows(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        labels = np.array([0, 1, 2, 0, 1])
        rows = np.arange(5)

        def build(tape, n):
            g = tape.gather_rows(n["x"], np.array([0, 2, 2, 3, 0]))
            return tape.cross_entropy(g, labels, rows)

        assert_tape_matches_fd(build, {"x": x})

    def test_scatter_places_rows_and_zero_fills(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        labels = np.array([1, 0, 3, 2, 1])
        rows = np.array([0, 2, 4])

        def build(tape, n):
            s = tape.scatter_rows(n["x"], np.array([4, 0, 2]), 5)
            return tape.cross_entropy(s, labels, rows)

        tape = Tape()
        node = tape.leaf(x)
        s = tape.scatter_rows(node, np.array([4, 0, 2]), 5)
        assert np.array_equal(s.value[1], np.zeros(4))
        assert np.array_equal(s.value[4], x[0])
        assert_tape_matches_fd(build, {"x": x})

    def test_place_rows_equals_scatter_sum(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
        pos = [np.array([3, 0]), np.array([1, 4, 2])]
        labels = np.array([0, 1, 2, 0, 1])
        rows = np.arange(5)

        tape = Tape()
        na, nb = tape.constant(a), tape.constant(b)
        placed = tape.place_rows([na, nb], pos, 5)
        summed = tape.add_n([
            tape.scatter_rows(na, pos[0], 5),
            tape.scatter_rows(nb, pos[1], 5),
        ])
        assert np.array_equal(placed.value, summed.value)

        def build(tape, n):
            placed = tape.place_rows([n["a"], n["b"]], pos, 5)
            return tape.cross_entropy(placed, labels, rows)

        assert_tape_matches_fd(build, {"a": a, "b": b})
        with pytest.raises(ValueError):
            Tape().place_rows([], [], 5)

    def test_concat_and_column_split_gradient(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
        labels = np.array([0, 4, 2, 1])

        def build(tape, n):
            c = tape.concat_cols([n["a"], n["b"]])
            return tape.cross_entropy(c, labels, np.arange(4))

        assert_tape_matches_fd(build, {"a": a, "b": b})

    def test_stack_rows_and_column(self):
        rng = np.random.default_rng(3)
        h1, h2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        labels = np.array([0, 1])

        def build(tape, n):
            stacked = tape.stack_rows([tape.mean_pool(n["h1"]),
                                       tape.mean_pool(n["h2"])])
            col = tape.column(stacked, 2)
            logits = tape.row_scale_shift(col, 0.5, stacked)
            return tape.cross_entropy(logits, labels, np.arange(2))

        assert_tape_matches_fd(build, {"h1": h1, "h2": h2})


class TestDensePipeline:
    def test_mlp_with_spmm_dropout_matches_fd(self):
        rng = np.random.default_rng(4)
        vals = {
            "x": rng.normal(size=(4, 3)),
            "w1": rng.normal(size=(3, 4)) * 0.7,
            "b1": rng.normal(size=4) * 0.1,
            "w2": rng.normal(size=(4, 3)) * 0.7,
        }
        adj = small_adjacency()
        labels = np.array([0, 2, 1, 0, 2])

        def build(tape, n):
            z = tape.add_rowvec(tape.matmul(n["x"], n["w1"]), n["b1"])
            # shift activations off the kink so differencing stays clean
            h = tape.relu(tape.add_n([z, tape.constant(np.full((4, 4), 0.31))]))
            h = tape.dropout(h, 0.25, np.random.default_rng(99))
            m = tape.spmm(adj, h)
            logits = tape.matmul(m, n["w2"])
            return tape.cross_entropy(logits, labels, np.array([0, 2, 3]))

        assert_tape_matches_fd(build, vals)

    def test_attention_shaped_graph_matches_fd(self):
        rng = np.random.default_rng(5)
        vals = {
            "h1": rng.normal(size=(4, 5)),
            "h2": rng.normal(size=(4, 5)),
            "h3": rng.normal(size=(4, 5)),
            "wp": rng.normal(size=(5, 3)),
        }
        labels = np.array([1, 3, 0])

        def build(tape, n):
            stacked = tape.stack_rows([tape.mean_pool(n["h1"]),
                                       tape.mean_pool(n["h2"]),
                                       tape.mean_pool(n["h3"])])
            theta = tape.matmul(stacked, n["wp"])
            via_minmax = tape.column(tape.minmax_columns(theta), 0)
            via_softmax = tape.column(tape.softmax_rows(theta), 1)
            fused = tape.add_n([
                tape.row_scale_shift(via_minmax, 1.0 / 3.0, stacked),
                tape.row_scale_shift(via_softmax, 0.0, stacked),
            ])
            penalty = tape.l1(tape.gram(fused), exclude_diag=True)
            ce = tape.cross_entropy(fused, labels, np.arange(3))
            return tape.affine_scalars(ce, penalty, 0.025)

        # l1 is only differentiable away from zero; confirm the fixture stays clear
        tape = Tape()
        nodes = {k: tape.constant(v) for k, v in vals.items()}
        loss = build(tape, nodes)
        assert np.isfinite(loss.value)
        assert_tape_matches_fd(build, vals, rtol=1e-4, atol=1e-7)


class TestHandDerivedOracle:
    def test_two_layer_mlp_against_manual_chain_rule(self):
        """Gradients written out by hand, no tape involved on the oracle side."""
        rng = np.random.default_rng(6)
        x = rng.normal(size=(6, 4))
        w1 = rng.normal(size=(4, 5)) * 0.6
        b1 = rng.normal(size=5) * 0.1
        w2 = rng.normal(size=(5, 3)) * 0.6
        labels = np.array([0, 1, 2, 0, 1, 2])
        rows = np.array([0, 1, 3, 5])

        tape = Tape()
        nodes = {
            "w1": tape.leaf(w1), "b1": tape.leaf(b1), "w2": tape.leaf(w2),
        }
        z1 = tape.add_rowvec(tape.matmul(tape.constant(x), nodes["w1"]), nodes["b1"])
        a1 = tape.relu(z1)
        logits = tape.matmul(a1, nodes["w2"])
        loss = tape.cross_entropy(logits, labels, rows)
        grads = backward(loss, tape, nodes)

        z1_ref = x @ w1 + b1
        a1_ref = np.maximum(z1_ref, 0.0)
        _, probs = masked_mean_cross_entropy(a1_ref @ w2, labels, rows)
        delta = probs.copy()
        delta[np.arange(rows.size), labels[rows]] -= 1.0
        delta /= rows.size
        dlogits = np.zeros((6, 3))
        dlogits[rows] = delta
        dw2 = a1_ref.T @ dlogits
        da1 = dlogits @ w2.T
        dz1 = da1 * (z1_ref > 0)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)

        assert np.allclose(grads["w2"], dw2, atol=1e-13)
        assert np.allclose(grads["w1"], dw1, atol=1e-13)
        assert np.allclose(grads["b1"], db1, atol=1e-13)

    def test_untouched_leaf_gets_exact_zeros(self):
        tape = Tape()
        used = tape.leaf(np.ones((2, 2)))
        unused = tape.leaf(np.ones((3, 4)))
        loss = tape.l1(used)
        grads = backward(loss, tape, {"used": used, "unused": unused})
        assert np.array_equal(grads["unused"], np.zeros((3, 4)))
        assert grads["unused"].shape == (3, 4)

    def test_constants_block_gradient_flow(self):
        tape = Tape()
        w = tape.leaf(np.ones((2, 2)))
        c = tape.constant(np.full((2, 2), 3.0))
        loss = tape.l1(tape.matmul(c, w))
        tape.backward(loss)
        assert c.grad is None
        assert w.grad is not None

    def test_backward_rejects_matrix_loss(self):
        tape = Tape()
        w = tape.leaf(np.ones((2, 2)))
        y = tape.relu(w)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)


class TestFiniteDiffHarness:
    @staticmethod
    def _quadratic_bundle():
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 3))
        labels = np.array([0, 1, 2, 1, 0])
        rows = np.arange(5)
        params = {"w": rng.normal(size=(3, 3)) * 0.5,
                  "b": rng.normal(size=3) * 0.1}

        def loss_and_grads(p, need):
            tape = Tape()
            make = tape.leaf if need else tape.constant
            nodes = {k: make(p[k]) for k in sorted(p)}
            logits = tape.add_rowvec(tape.matmul(tape.constant(x), nodes["w"]),
                                     nodes["b"])
            loss = tape.cross_entropy(logits, labels, rows)
            if not need:
                return float(loss.value), None
            return float(loss.value), backward(loss, tape, nodes)

        return params, loss_and_grads

    def test_report_fields_and_pass(self):
        params, fn = self._quadratic_bundle()
        report = finite_diff_check(fn, params, eps=1e-5, tol=1e-4)
        assert isinstance(report, FiniteDiffReport)
        assert report.passed
        assert report.max_rel_err < 1e-6
        assert set(report.per_param) == {"w", "b"}
        assert report.worst_param in {"w", "b"}
        d = report.to_dict()
        for key in ("eps", "tol", "max_rel_err", "worst_param", "worst_index",
                    "passed", "per_param"):
            assert key in d
        for entry in d["per_param"].values():
            assert {"max_rel_err", "argmax", "analytic", "numeric"} <= set(entry)

    def test_coarse_eps_is_worse(self):
        params, fn = self._quadratic_bundle()
        fine = finite_diff_check(fn, params, eps=1e-5)
        coarse = finite_diff_check(fn, params, eps=1e-2)
        assert coarse.max_rel_err > fine.max_rel_err

    def test_param_filter_restricts_scan(self):
        params, fn = self._quadratic_bundle()
        report = finite_diff_check(fn, params, param_filter=lambda n: n == "b")
        assert set(report.per_param) == {"b"}

    def test_unfrozen_randomness_is_caught(self):
        """A loss whose dropout mask changes call to call must fail the check."""
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 3))
        labels = np.array([0, 1, 2, 0])
        params = {"w": rng.normal(size=(3, 3)) * 0.5}
        counter = [0]

        def leaky(p, need):
            counter[0] += 1
            tape = Tape()
            make = tape.leaf if need else tape.constant
            w = make(p["w"])
            h = tape.dropout(tape.matmul(tape.constant(x), w), 0.5,
                             np.random.default_rng(counter[0]))
            loss = tape.cross_entropy(h, labels, np.arange(4))
            if not need:
                return float(loss.value), None
            return float(loss.value), backward(loss, tape, {"w": w})

        report = finite_diff_check(leaky, params, eps=1e-5, tol=1e-4)
        assert not report.passed
        assert report.max_rel_err > 1.0
