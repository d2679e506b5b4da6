import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sgraf.encoders import TextualFeatures, VisualFeatures
from sgraf.simrep import (
    I2T,
    T2I,
    SimilarityParams,
    build_nodes,
    compute_nodes,
    cross_attend,
    global_similarity,
    local_similarities,
    similarity_vector,
    unstack_nodes,
)
from sgraf.tensor import Tensor

import oracles

finite = st.floats(-10, 10, allow_nan=False)


class TestSimilarityVector:
    def test_equal_inputs_give_zero_vector(self, rng):
        x = rng.standard_normal(4)
        out = similarity_vector(x, x.copy(), Tensor(rng.standard_normal((3, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_orthogonal_unit_pair(self):
        out = similarity_vector(np.array([1.0, 0.0]), np.array([0.0, 1.0]), Tensor(np.eye(2)))
        np.testing.assert_allclose(out.data, [1 / math.sqrt(2)] * 2, rtol=1e-15)

    def test_matches_loop_oracle(self, rng):
        for _ in range(20):
            x, y, W = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal((4, 5))
            ref = oracles.sim_vector(x.tolist(), y.tolist(), W.tolist())
            np.testing.assert_allclose(similarity_vector(x, y, Tensor(W)).data, ref, atol=1e-12)

    @given(hnp.arrays(np.float64, 3, elements=finite), hnp.arrays(np.float64, 3, elements=finite), st.integers(0, 1000))
    def test_unit_norm_symmetric_and_scale_free(self, x, y, seed):
        W = np.random.default_rng(seed).standard_normal((4, 3))
        out = similarity_vector(x, y, Tensor(W)).data
        np.testing.assert_array_equal(out, similarity_vector(y, x, Tensor(W)).data)
        if np.linalg.norm(W @ (x - y) ** 2) > 1e-6:
            np.testing.assert_allclose(similarity_vector(x, y, Tensor(3.7 * W)).data, out, atol=1e-10)
            assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-6)

    def test_global_similarity_delegates(self, rng):
        params = SimilarityParams.init(rng, d=4, m=3)
        v, t = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_array_equal(global_similarity(v, t, params).data, similarity_vector(v, t, params.w_global).data)
        np.testing.assert_array_equal(global_similarity(v, v, params).data, 0.0)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            similarity_vector(np.ones(3), np.ones(3), Tensor(np.ones((2, 4))))


class TestCrossAttend:
    def test_zero_temperature_is_uniform(self, rng):
        amap = cross_attend(rng.standard_normal((4, 3)), rng.standard_normal((5, 3)), lam=0.0)
        np.testing.assert_allclose(amap.weights.data, 0.25, rtol=1e-15)

    def test_low_temperature_is_one_hot(self, rng):
        V, Tw = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
        amap = cross_attend(V, Tw, lam=1e3)
        chat = amap.normalized.data
        for j in range(5):
            col = np.sort(chat[:, j])
            if col[-1] - col[-2] > 0.05:
                np.testing.assert_allclose(amap.weights.data[:, j], np.eye(4)[np.argmax(chat[:, j])], atol=1e-6)

    @pytest.mark.parametrize("axis", ["query", "context"])
    def test_matches_loop_oracle(self, axis):
        rng = np.random.default_rng(21)
        for _ in range(50):
            K, L, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4)
            V, Tw = rng.standard_normal((K, d)), rng.standard_normal((L, d))
            amap = cross_attend(V, Tw, 9.0, T2I, norm_axis=axis)
            alpha, att = oracles.cross_attend(V.tolist(), Tw.tolist(), 9.0, axis)
            np.testing.assert_allclose(amap.weights.data, alpha, atol=1e-10)
            np.testing.assert_allclose(amap.attended.data, att, atol=1e-10)

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_columns_are_distributions_and_sharpen(self, K, L, seed):
        rng = np.random.default_rng(seed)
        V, Tw = rng.standard_normal((K, 3)), rng.standard_normal((L, 3))
        prev = None
        for lam in (0.5, 2.0, 9.0, 40.0):
            w = cross_attend(V, Tw, lam).weights.data
            assert np.all(w >= 0)
            np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)
            if prev is not None:
                assert np.all(w.max(axis=0) >= prev - 1e-12)
            prev = w.max(axis=0)

    def test_i2t_is_t2i_with_roles_swapped(self, rng):
        V, Tw = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        a = cross_attend(V, Tw, 9.0, I2T)
        b = cross_attend(Tw, V, 9.0, T2I)
        np.testing.assert_array_equal(a.weights.data, b.weights.data)
        np.testing.assert_array_equal(a.attended.data, b.attended.data)
        assert a.attended.shape == (3, 4)

    def test_nonpositive_cosines_give_zero_normalized_slice(self):
        V = np.array([[1.0, 0.0], [0.0, 1.0]])
        Tw = np.array([[-1.0, -1.0]])
        amap = cross_attend(V, Tw, 9.0)
        np.testing.assert_array_equal(amap.normalized.data, 0.0)
        np.testing.assert_allclose(amap.weights.data, 0.5)

    def test_zero_vectors_have_zero_cosine(self):
        amap = cross_attend(np.zeros((2, 3)), np.ones((1, 3)), 9.0)
        np.testing.assert_array_equal(amap.cosines.data, 0.0)

    def test_bad_direction(self, rng):
        with pytest.raises(ValueError):
            cross_attend(np.ones((1, 2)), np.ones((1, 2)), 9.0, direction="sideways")


class TestLocalsAndNodes:
    def test_identical_rows_are_zero(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(local_similarities(x, x.copy(), Tensor(rng.standard_normal((2, 4)))).data, 0.0)

    def test_rowwise_oracle(self, rng):
        a, b, W = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        out = local_similarities(a, b, Tensor(W)).data
        for j in range(3):
            np.testing.assert_allclose(out[j], oracles.sim_vector(a[j].tolist(), b[j].tolist(), W.tolist()), atol=1e-12)
        np.testing.assert_array_equal(local_similarities(a[:1], b[:1], Tensor(W)).data[0], similarity_vector(a[0], b[0], Tensor(W)).data)

    def test_row_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            local_similarities(np.ones((2, 3)), np.ones((3, 3)), Tensor(np.ones((2, 3))))

    def test_global_goes_last_and_round_trips(self, rng):
        loc, glo = Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal(4))
        nodes = build_nodes(loc, glo)
        assert nodes.stacked.shape == (3, 4)
        np.testing.assert_array_equal(nodes.stacked.data[2], glo.data)
        back_l, back_g = unstack_nodes(nodes)
        np.testing.assert_array_equal(back_l.data, loc.data)
        np.testing.assert_array_equal(back_g.data, glo.data)

    def test_global_only_node_set(self, rng):
        nodes = build_nodes(Tensor(np.zeros((0, 4))), Tensor(rng.standard_normal(4)))
        assert nodes.count == 1 and nodes.has_global

    def test_empty_node_set_rejected(self):
        with pytest.raises(ValueError):
            build_nodes(None, None)


class TestComputeNodes:
    def _features(self, rng, K=3, L=4, d=5):
        V, Tw = rng.standard_normal((K, d)), rng.standard_normal((L, d))
        return VisualFeatures(Tensor(V), Tensor(V.mean(0))), TextualFeatures(Tensor(Tw), Tensor(Tw.mean(0)))

    def test_node_rows_are_unit_norm(self, rng):
        vis, txt = self._features(rng)
        nodes = compute_nodes(vis, txt, SimilarityParams.init(rng, d=5, m=6))
        assert nodes.count == 5
        np.testing.assert_allclose(np.linalg.norm(nodes.stacked.data, axis=-1), 1.0, atol=1e-5)

    def test_i2t_gives_one_node_per_region(self, rng):
        vis, txt = self._features(rng)
        assert compute_nodes(vis, txt, SimilarityParams.init(rng, d=5, m=6), direction=I2T).count == 4

    def test_scalar_mode_bypasses_weights(self, rng):
        vis, txt = self._features(rng)
        params = SimilarityParams.init(rng, d=5, m=6)
        nodes = compute_nodes(vis, txt, params, similarity="scalar")
        assert nodes.stacked.shape == (5, 1)
        zeroed = SimilarityParams(Tensor(np.zeros((6, 5))), Tensor(np.zeros((6, 5))))
        np.testing.assert_array_equal(compute_nodes(vis, txt, zeroed, similarity="scalar").stacked.data, nodes.stacked.data)
        v, t = vis.global_.data, txt.global_.data
        assert nodes.stacked.data[-1, 0] == pytest.approx(v @ t / np.linalg.norm(v) / np.linalg.norm(t), rel=1e-12)

    def test_ablations(self, rng):
        vis, txt = self._features(rng)
        params = SimilarityParams.init(rng, d=5, m=6)
        assert compute_nodes(vis, txt, params, use_local=False).count == 1
        nodes = compute_nodes(vis, txt, params, use_global=False)
        assert nodes.count == 4 and not nodes.has_global
