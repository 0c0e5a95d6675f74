"""Classification head, diversity penalty, and combined loss."""

import numpy as np
import pytest

from hetens.gradients import Tape, backward
from hetens.objective import (
    LossBreakdown,
    accuracy,
    diversity_matrix,
    mlp_predict,
    total_loss,
)


class TestMlpHead:
    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(5, 4))
        p = {
            "mlp/W1": rng.normal(size=(4, 6)),
            "mlp/b1": rng.normal(size=6),
            "mlp/W2": rng.normal(size=(6, 3)),
            "mlp/b2": rng.normal(size=3),
        }
        tape = Tape()
        nodes = {k: tape.constant(v) for k, v in p.items()}
        out = mlp_predict(tape, tape.constant(h), nodes)
        ref = np.maximum(h @ p["mlp/W1"] + p["mlp/b1"], 0.0) @ p["mlp/W2"] + p["mlp/b2"]
        assert np.allclose(out.value, ref, atol=1e-13)


class TestDiversity:
    def test_orthonormal_pooled_rows_give_identity(self):
        # views whose pooled vectors are orthonormal: S = I, so the penalty
        # reduces to the number of views (or zero off-diagonal)
        views = [
            np.tile(np.array([1.0, 0.0, 0.0]), (4, 1)),
            np.tile(np.array([0.0, 1.0, 0.0]), (4, 1)),
            np.tile(np.array([0.0, 0.0, 1.0]), (4, 1)),
        ]
        tape = Tape()
        s, pooled = diversity_matrix(tape, [tape.constant(v) for v in views])
        assert np.allclose(s.value, np.eye(3), atol=1e-15)
        assert pooled.value.shape == (3, 3)

    def test_matches_pooled_gram_numpy(self):
        rng = np.random.default_rng(1)
        views = [rng.normal(size=(6, 4)) for _ in range(3)]
        tape = Tape()
        s, pooled = diversity_matrix(tape, [tape.constant(v) for v in views])
        ref_pool = np.stack([v.mean(axis=0) for v in views])
        assert np.allclose(pooled.value, ref_pool, atol=1e-14)
        assert np.allclose(s.value, ref_pool @ ref_pool.T, atol=1e-14)

    def test_row_order_follows_input_order(self):
        a = np.full((2, 2), 1.0)
        b = np.full((2, 2), 2.0)
        tape = Tape()
        _, pooled = diversity_matrix(tape, [tape.constant(a), tape.constant(b)])
        assert pooled.value[0, 0] == 1.0 and pooled.value[1, 0] == 2.0

    def test_empty_view_list_rejected(self):
        with pytest.raises(ValueError, match="at least one view"):
            diversity_matrix(Tape(), [])

    def test_duplicated_views_maximize_offdiagonal(self):
        # identical views give |S_ij| = |S_ii|: the penalty sees full overlap
        v = np.random.default_rng(2).normal(size=(4, 3))
        tape = Tape()
        s, _ = diversity_matrix(tape, [tape.constant(v), tape.constant(v)])
        assert np.allclose(s.value[0, 1], s.value[0, 0], atol=1e-14)


class TestTotalLoss:
    @staticmethod
    def bundle(reg_lambda, similarity=True, exclude_diag=False):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 3))
        labels = np.array([0, 1, 2, 0, 1, 2])
        rows = np.array([0, 2, 4, 5])
        tape = Tape()
        sim = tape.constant(rng.normal(size=(3, 3))) if similarity else None
        loss, breakdown = total_loss(tape, tape.constant(logits), labels, rows,
                                     sim, reg_lambda, exclude_diag)
        return loss, breakdown, sim

    def test_combination_and_breakdown(self):
        loss, b, sim = self.bundle(0.25)
        assert isinstance(b, LossBreakdown)
        assert loss.value == pytest.approx(b.cross_entropy + 0.25 * b.diversity,
                                           rel=1e-14)
        assert b.total == pytest.approx(float(loss.value), rel=1e-14)
        assert b.diversity == pytest.approx(float(np.abs(sim.value).sum()), rel=1e-14)

    def test_zero_lambda_still_reports_diversity(self):
        loss, b, sim = self.bundle(0.0)
        assert b.reg_lambda == 0.0
        assert b.diversity == pytest.approx(float(np.abs(sim.value).sum()), rel=1e-14)
        assert loss.value == pytest.approx(b.cross_entropy, rel=1e-14)

    def test_none_similarity_drops_regularizer(self):
        loss, b, _ = self.bundle(0.5, similarity=False)
        assert b.diversity == 0.0 and b.reg_lambda == 0.0
        assert loss.value == pytest.approx(b.cross_entropy, rel=1e-14)

    def test_exclude_diag_changes_penalty(self):
        _, with_diag, sim = self.bundle(1.0, exclude_diag=False)
        _, without, _ = self.bundle(1.0, exclude_diag=True)
        diag_mass = float(np.abs(np.diag(sim.value)).sum())
        assert with_diag.diversity - without.diversity == pytest.approx(diag_mass,
                                                                        rel=1e-12)

    def test_uniform_logits_cross_entropy_is_log_c(self):
        tape = Tape()
        logits = tape.constant(np.zeros((5, 4)))
        labels = np.array([0, 1, 2, 3, 0])
        loss, b = total_loss(tape, logits, labels, np.arange(5), None, 0.0)
        assert b.cross_entropy == pytest.approx(np.log(4), rel=1e-12)

    def test_regularizer_gradient_scales_with_lambda(self):
        rng = np.random.default_rng(4)
        logits_v = rng.normal(size=(4, 3))
        labels = np.array([0, 1, 2, 0])
        pooled_v = rng.normal(size=(2, 3))

        def grad_for(lam):
            tape = Tape()
            pooled = tape.leaf(pooled_v)
            sim = tape.gram(pooled)
            loss, _ = total_loss(tape, tape.constant(logits_v), labels,
                                 np.arange(4), sim, lam)
            return backward(loss, tape, {"pooled": pooled})["pooled"]

        g1, g2 = grad_for(0.1), grad_for(0.2)
        assert np.allclose(g2, 2.0 * g1, rtol=1e-12)


class TestAccuracy:
    def test_counts_matches(self):
        logits = np.array([[2.0, 1.0], [0.0, 3.0], [5.0, 4.0], [1.0, 2.0]])
        labels = np.array([0, 1, 1, 1])
        assert accuracy(logits, labels, np.arange(4)) == pytest.approx(0.75)
        assert accuracy(logits, labels, np.array([0, 1])) == pytest.approx(1.0)

    def test_tie_goes_to_first_class(self):
        logits = np.array([[1.0, 1.0]])
        assert accuracy(logits, np.array([0]), np.array([0])) == 1.0
        assert accuracy(logits, np.array([1]), np.array([0])) == 0.0

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            accuracy(np.ones((2, 2)), np.zeros(2, dtype=int), np.zeros(0, dtype=int))
