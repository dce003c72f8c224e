"""Scoring functions: hand arithmetic, invariants, all-tails consistency."""

import numpy as np
import pytest

from promptlink import tensor as T
from promptlink.optim import ParameterGroup, grad_check
from promptlink.scorers import (ConvEScorer, DistMultScorer, EmbeddingStore,
                                TextOnlyHead, TransEScorer, make_scorer)
from promptlink.tensor import default_dtype, tensor


def store_with(values, group=None):
    group = group or ParameterGroup()
    st = EmbeddingStore(group, len(values), 2, len(values[0]),
                        rng=np.random.default_rng(0))
    st.entities.data = np.asarray(values, dtype=st.entities.data.dtype)
    return st


class TestTransE:
    def test_exact_translation_scores_zero(self):
        s = TransEScorer(p=2)
        f = s.score_one(tensor([[1.0, 0.0]]), tensor([[0.0, 1.0]]), tensor([[1.0, 1.0]]))
        assert f.data[0] == 0.0

    def test_hand_value(self):
        s = TransEScorer(p=2)
        f = s.score_one(tensor([[1.0, 0.0]]), tensor([[0.0, 0.0]]), tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(f.data, [-1.0])

    def test_farther_tail_scores_strictly_lower(self):
        s = TransEScorer(p=2)
        q_h, q_r = tensor([[1.0, 1.0]]), tensor([[0.5, -0.5]])
        near = s.score_one(q_h, q_r, tensor([[1.5, 0.5]])).data[0]
        far = s.score_one(q_h, q_r, tensor([[3.0, 3.0]])).data[0]
        assert near > far

    def test_nonpositive_with_equality_iff_translation(self):
        rng = np.random.default_rng(0)
        s = TransEScorer(p=2)
        for _ in range(50):
            h, r, t = (tensor(rng.normal(size=(1, 4))) for _ in range(3))
            f = s.score_one(h, r, t).data[0]
            assert f <= 0.0
            if f == 0.0:
                np.testing.assert_array_equal(h.data + r.data, t.data)

    def test_l1_mode(self):
        s = TransEScorer(p=1)
        f = s.score_one(tensor([[1.0, 0.0]]), tensor([[0.0, 0.0]]), tensor([[0.0, 1.0]]))
        np.testing.assert_allclose(f.data, [-2.0])

    def test_bad_norm_order(self):
        with pytest.raises(ValueError):
            TransEScorer(p=3)

    def test_score_all_matches_loop(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(1)
            st = store_with(rng.normal(size=(7, 4)))
            s = TransEScorer(p=2)
            h, r = tensor(rng.normal(size=(3, 4))), tensor(rng.normal(size=(3, 4)))
            allscores = s.score_all(h, r, st).data
            assert allscores.shape == (3, 7)
            for i in range(3):
                for t in range(7):
                    one = s.score_one(h[i:i+1], r[i:i+1], tensor(st.entities.data[t:t+1])).data[0]
                    assert abs(allscores[i, t] - one) < 1e-6


class TestDistMult:
    def test_hand_value(self):
        s = DistMultScorer()
        f = s.score_one(tensor([[1.0, 2.0]]), tensor([[0.5, 1.0]]), tensor([[2.0, 1.0]]))
        np.testing.assert_allclose(f.data, [3.0])

    def test_all_ones_relation_is_dot_product(self):
        rng = np.random.default_rng(2)
        s = DistMultScorer()
        h = rng.normal(size=(1, 5))
        t = rng.normal(size=(1, 5))
        f = s.score_one(tensor(h), tensor(np.ones((1, 5))), tensor(t)).data[0]
        np.testing.assert_allclose(f, float(h @ t.T), rtol=1e-6)

    def test_zero_argument_zero_score(self):
        s = DistMultScorer()
        z = tensor(np.zeros((1, 3)))
        x = tensor(np.ones((1, 3)))
        assert s.score_one(z, x, x).data[0] == 0.0

    def test_head_tail_symmetry(self):
        rng = np.random.default_rng(3)
        s = DistMultScorer()
        with default_dtype(np.float64):
            h, r, t = (tensor(rng.normal(size=(4, 6))) for _ in range(3))
            np.testing.assert_allclose(s.score_one(h, r, t).data,
                                       s.score_one(t, r, h).data, rtol=1e-12)

    def test_score_all_matches_loop(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(4)
            st = store_with(rng.normal(size=(6, 3)))
            s = DistMultScorer()
            h, r = tensor(rng.normal(size=(2, 3))), tensor(rng.normal(size=(2, 3)))
            allscores = s.score_all(h, r, st).data
            for i in range(2):
                for t in range(6):
                    one = s.score_one(h[i:i+1], r[i:i+1], tensor(st.entities.data[t:t+1])).data[0]
                    assert abs(allscores[i, t] - one) < 1e-6


def make_conve(d=8, rows=2, cols=4, channels=4, seed=0):
    group = ParameterGroup()
    sc = ConvEScorer(group, d, rows, cols, channels, 3, rng=np.random.default_rng(seed))
    return sc, group


class TestConvE:
    def test_shape_arithmetic(self):
        # d=8, reshape 2x4 each -> stacked 4x4; 4 channels, 3x3 kernel pad 1
        # -> 4x4x4 = 64 flattened -> FC to 8
        sc, _ = make_conve()
        assert sc.conv_w.shape == (4, 1, 3, 3)
        assert sc.fc_w.shape == (64, 8)
        rng = np.random.default_rng(0)
        out = sc.query_map(tensor(rng.normal(size=(3, 8))), tensor(rng.normal(size=(3, 8))))
        assert out.shape == (3, 8)

    def test_all_zero_weights_zero_scores(self):
        sc, _ = make_conve()
        sc.conv_w.data[:] = 0
        sc.conv_b.data[:] = 0
        sc.fc_w.data[:] = 0
        sc.fc_b.data[:] = 0
        rng = np.random.default_rng(1)
        st = store_with(rng.normal(size=(5, 8)))
        scores = sc.score_all(tensor(rng.normal(size=(2, 8))), tensor(rng.normal(size=(2, 8))), st)
        np.testing.assert_array_equal(scores.data, 0)

    def test_query_map_nonnegative(self):
        sc, _ = make_conve(seed=5)
        rng = np.random.default_rng(5)
        out = sc.query_map(tensor(rng.normal(size=(10, 8))), tensor(rng.normal(size=(10, 8))))
        assert np.all(out.data >= 0)

    def test_invalid_reshape(self):
        with pytest.raises(ValueError, match="factor"):
            make_conve(d=8, rows=3, cols=4)

    def test_gradient_wrt_query_inputs(self):
        with default_dtype(np.float64):
            sc, group = make_conve(seed=7)
            rng = np.random.default_rng(7)
            st = store_with(rng.normal(size=(5, 8)))
            h = tensor(rng.normal(size=(2, 8)), requires_grad=True)
            r = tensor(rng.normal(size=(2, 8)), requires_grad=True)

            def f():
                return sc.score_all(h, r, st).sum()

            report = grad_check(f, {"h_hat": h, "r_hat": r}, tol=1e-4)
        assert report.passed, report.summary()

    def test_score_all_matches_loop(self):
        with default_dtype(np.float64):
            sc, _ = make_conve(seed=8)
            rng = np.random.default_rng(8)
            st = store_with(rng.normal(size=(6, 8)))
            h, r = tensor(rng.normal(size=(2, 8))), tensor(rng.normal(size=(2, 8)))
            allscores = sc.score_all(h, r, st).data
            for i in range(2):
                for t in range(6):
                    one = sc.score_one(h[i:i+1], r[i:i+1], tensor(st.entities.data[t:t+1])).data[0]
                    assert abs(allscores[i, t] - one) < 1e-6


class TestTextOnlyHead:
    def test_zero_weights_uniform_softmax(self):
        group = ParameterGroup()
        head = TextOnlyHead(group, 5, 4, rng=np.random.default_rng(0))
        head.w_cls.data[:] = 0
        z = tensor(np.random.default_rng(0).normal(size=(2, 4)))
        scores = head.score_all_from_states(z, z).data
        p = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(p, 0.2, atol=1e-9)

    def test_output_length(self):
        group = ParameterGroup()
        head = TextOnlyHead(group, 9, 4, rng=np.random.default_rng(0))
        z = tensor(np.zeros((3, 4)))
        assert head.score_all_from_states(z, z).shape == (3, 9)


class TestScorerInvariants:
    @pytest.mark.parametrize("kind", ["transe", "distmult", "conve"])
    def test_argmax_invariant_under_constant_shift(self, kind):
        rng = np.random.default_rng(11)
        group = ParameterGroup()
        sc = make_scorer(kind, group, 8, 6, 4, rng, conve_rows=2, conve_cols=4,
                         conve_channels=4)
        st = store_with(rng.normal(size=(6, 8)), group=ParameterGroup())
        h, r = tensor(rng.normal(size=(3, 8))), tensor(rng.normal(size=(3, 8)))
        scores = sc.score_all(h, r, st).data
        shifted = scores + 17.5
        np.testing.assert_array_equal(scores.argmax(axis=1), shifted.argmax(axis=1))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown scorer"):
            make_scorer("rotate", ParameterGroup(), 8, 6, 4, np.random.default_rng(0))
