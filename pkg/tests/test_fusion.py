"""Residual attention fusion against hand-computed oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetens.fusion import fuse_views, normalize_scores, raw_attention
from hetens.gradients import Tape, backward
from hetens.numerics import column_minmax_normalize

from helpers import fd_grad


def make_sources(rng, k, n=5, d=4, proj=3):
    embeddings = [rng.normal(size=(n, d)) for _ in range(k)]
    projections = [rng.normal(size=(d, proj)) for _ in range(k)]
    score = rng.normal(size=(k * proj, k))
    return embeddings, projections, score


def constants(tape, arrays):
    return [tape.constant(a) for a in arrays]


class TestRawAttention:
    def test_matches_blockwise_numpy(self):
        rng = np.random.default_rng(0)
        emb, proj, score = make_sources(rng, 3)
        tape = Tape()
        theta = raw_attention(tape, constants(tape, emb), constants(tape, proj),
                              tape.constant(score))
        expected = np.concatenate([h @ p for h, p in zip(emb, proj)], axis=1) @ score
        assert np.allclose(theta.value, expected, atol=1e-13)
        assert theta.value.shape == (5, 3)

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(1)
        emb, proj, score = make_sources(rng, 2)
        tape = Tape()
        with pytest.raises(ValueError, match="projections"):
            raw_attention(tape, constants(tape, emb),
                          constants(tape, proj[:1]), tape.constant(score))

    def test_score_width_must_match_source_count(self):
        rng = np.random.default_rng(2)
        emb, proj, _ = make_sources(rng, 2)
        bad_score = rng.normal(size=(6, 3))  # 3 columns for 2 sources
        tape = Tape()
        with pytest.raises(ValueError, match="columns"):
            raw_attention(tape, constants(tape, emb), constants(tape, proj),
                          tape.constant(bad_score))


class TestNormalizeScores:
    def test_minmax_delegates(self):
        theta = np.array([[0.0, 4.0], [1.0, 2.0], [2.0, 0.0]])
        tape = Tape()
        out = normalize_scores(tape, tape.constant(theta), "minmax")
        assert np.allclose(out.value, [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        tape = Tape()
        out = normalize_scores(tape, tape.constant(rng.normal(size=(4, 3))),
                               "softmax")
        assert np.allclose(out.value.sum(axis=1), 1.0, atol=1e-12)

    def test_unknown_kind(self):
        tape = Tape()
        with pytest.raises(ValueError, match="normalizer"):
            normalize_scores(tape, tape.constant(np.ones((2, 2))), "sparsemax")

    def test_affine_column_transform_bitwise_invariant(self):
        # dyadic scales and shifts are float-exact, so the normalized scores
        # must come out bit for bit the same
        rng = np.random.default_rng(4)
        theta = rng.integers(-16, 16, size=(6, 3)).astype(np.float64) / 8.0
        scales = np.array([2.0, 0.25, 8.0])
        shifts = np.array([1.0, -3.0, 0.5])
        tape = Tape()
        base = normalize_scores(tape, tape.constant(theta), "minmax")
        moved = normalize_scores(
            tape, tape.constant(theta * scales + shifts), "minmax")
        assert np.array_equal(base.value, moved.value)


class TestFuseViews:
    def test_hand_example(self):
        h1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        h2 = np.array([[2.0, 2.0], [4.0, 4.0]])
        weights = np.array([[0.0, 1.0], [1.0, 0.0]])  # already normalized
        tape = Tape()
        fused = fuse_views(tape, tape.constant(weights),
                           constants(tape, [h1, h2]))
        # per node: (w1 + 1/2) h1 + (w2 + 1/2) h2
        expected = np.array([
            0.5 * h1[0] + 1.5 * h2[0],
            1.5 * h1[1] + 0.5 * h2[1],
        ])
        assert np.allclose(fused.value, expected, atol=1e-14)

    def test_naive_mode_is_plain_mean(self):
        rng = np.random.default_rng(5)
        hs = [rng.normal(size=(4, 3)) for _ in range(3)]
        tape = Tape()
        fused = fuse_views(tape, None, constants(tape, hs))
        assert np.allclose(fused.value, np.mean(hs, axis=0), atol=1e-14)

    def test_zero_sources_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError, match="zero sources"):
            fuse_views(tape, None, [])

    def test_full_stage_against_numpy_oracle(self):
        rng = np.random.default_rng(6)
        emb, proj, score = make_sources(rng, 3)
        tape = Tape()
        emb_nodes = constants(tape, emb)
        theta = raw_attention(tape, emb_nodes, constants(tape, proj),
                              tape.constant(score))
        norm = normalize_scores(tape, theta, "minmax")
        fused = fuse_views(tape, norm, emb_nodes)

        raw = np.concatenate([h @ p for h, p in zip(emb, proj)], axis=1) @ score
        tilde, _ = column_minmax_normalize(raw)
        expected = sum((tilde[:, j] + 1.0 / 3.0)[:, None] * emb[j]
                       for j in range(3))
        assert np.allclose(fused.value, expected, atol=1e-12)

    def test_gradients_reach_every_source(self):
        rng = np.random.default_rng(7)
        emb, proj, score = make_sources(rng, 2)
        labels = np.array([0, 1, 2, 0, 1])

        def run(values, need):
            tape = Tape()
            make = tape.leaf if need else tape.constant
            emb_nodes = [make(values[f"h{j}"]) for j in range(2)]
            proj_nodes = [make(values[f"p{j}"]) for j in range(2)]
            score_node = make(values["score"])
            theta = raw_attention(tape, emb_nodes, proj_nodes, score_node)
            fused = fuse_views(tape, normalize_scores(tape, theta, "minmax"),
                               emb_nodes)
            loss = tape.cross_entropy(fused, labels, np.arange(5))
            nodes = {f"h{j}": emb_nodes[j] for j in range(2)}
            nodes.update({f"p{j}": proj_nodes[j] for j in range(2)})
            nodes["score"] = score_node
            if need:
                return float(loss.value), backward(loss, tape, nodes)
            return float(loss.value), None

        values = {"h0": emb[0], "h1": emb[1], "p0": proj[0], "p1": proj[1],
                  "score": score}
        _, grads = run(values, True)
        work = {k: v.copy() for k, v in values.items()}
        for name, v in values.items():
            assert np.any(grads[name] != 0.0), name

            def f(x, _n=name):
                work[_n] = x
                return run(work, False)[0]

            num = fd_grad(f, v.copy())
            work[name] = v.copy()
            assert np.allclose(grads[name], num, rtol=1e-4, atol=1e-7), name

    @given(st.integers(min_value=0, max_value=2 ** 32 - 1),
           st.integers(min_value=1, max_value=4))
    @settings(max_examples=60, deadline=None)
    def test_fusion_weight_bounds_property(self, seed, k):
        rng = np.random.default_rng(seed)
        emb, proj, score = make_sources(rng, k)
        tape = Tape()
        emb_nodes = constants(tape, emb)
        theta = raw_attention(tape, emb_nodes, constants(tape, proj),
                              tape.constant(score))
        norm = normalize_scores(tape, theta, "minmax")
        weights = norm.value + 1.0 / k
        assert np.all(weights >= 1.0 / k - 1e-15)
        assert np.all(weights <= 1.0 + 1.0 / k + 1e-15)
        fused = fuse_views(tape, norm, emb_nodes)
        expected = sum(weights[:, j][:, None] * emb[j] for j in range(k))
        assert np.allclose(fused.value, expected, atol=1e-12)
