import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgraf.sgr import GraphState, SgrParams, StepParams, edge_weights, graph_step, reason, sgr_score
from sgraf.simrep import build_nodes
from sgraf.tensor import Tensor

import oracles


def _params(rng, m, steps):
    mats = [StepParams(*(Tensor(rng.standard_normal((m, m)) / np.sqrt(m)) for _ in range(3))) for _ in range(steps)]
    return SgrParams(mats, Tensor(rng.standard_normal(m)), Tensor(np.array(rng.standard_normal())))


def _nodes(rng, n_local, m):
    return build_nodes(Tensor(rng.standard_normal((n_local, m))), Tensor(rng.standard_normal(m)))


class TestEdgeWeights:
    def test_zero_incoming_projection_is_uniform(self, rng):
        E = edge_weights(Tensor(rng.standard_normal((4, 3))), Tensor(np.zeros((3, 3))), Tensor(rng.standard_normal((3, 3))))
        np.testing.assert_allclose(E.data, 0.25, rtol=1e-15)

    def test_single_node(self, rng):
        E = edge_weights(Tensor(rng.standard_normal((1, 3))), Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((3, 3))))
        assert E.data.tolist() == [[1.0]]

    def test_against_softmax_of_inner_products(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            P, m = rng.integers(1, 5), rng.integers(1, 4)
            S, Wi, Wo = rng.standard_normal((P, m)), rng.standard_normal((m, m)), rng.standard_normal((m, m))
            ref = oracles.edge_weights(S.tolist(), Wi.tolist(), Wo.tolist())
            np.testing.assert_allclose(edge_weights(Tensor(S), Tensor(Wi), Tensor(Wo)).data, ref, atol=1e-10)

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            edge_weights(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))), Tensor(np.ones((4, 4))))


class TestGraphStep:
    def test_identical_nodes(self, rng):
        s = rng.standard_normal(3)
        params = _params(rng, 3, 1)
        out = graph_step(GraphState(Tensor(np.tile(s, (4, 1)))), params)
        ref = np.maximum(params.steps[0].w_r.data @ s, 0.0)
        np.testing.assert_allclose(out.nodes.data, np.tile(ref, (4, 1)), atol=1e-13)
        assert out.step == 1

    def test_single_node_self_loop(self, rng):
        s = rng.standard_normal((1, 3))
        params = _params(rng, 3, 1)
        out = graph_step(GraphState(Tensor(s)), params)
        np.testing.assert_allclose(out.nodes.data[0], np.maximum(params.steps[0].w_r.data @ s[0], 0.0), rtol=1e-14)

    def test_against_dense_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            P, m = rng.integers(1, 5), rng.integers(1, 5)
            S = rng.standard_normal((P, m))
            params = _params(rng, m, 1)
            p = params.steps[0]
            ref = oracles.graph_step(S.tolist(), p.w_in.data.tolist(), p.w_out.data.tolist(), p.w_r.data.tolist())
            np.testing.assert_allclose(graph_step(GraphState(Tensor(S)), params).nodes.data, ref, atol=1e-10)

    def test_step_overflow(self, rng):
        params = _params(rng, 2, 2)
        with pytest.raises(IndexError):
            graph_step(GraphState(Tensor(np.ones((2, 2))), step=2), params)


class TestSgrScore:
    def test_zero_head_gives_half(self, rng):
        params = _params(rng, 4, 3)
        params.head_w, params.head_b = Tensor(np.zeros(4)), Tensor(np.array(0.0))
        assert sgr_score(_nodes(rng, 3, 4), params).data == 0.5

    def test_composed_oracle(self, rng):
        m, N = 8, 3
        nodes = _nodes(rng, 4, m)
        params = _params(rng, m, N)
        S = nodes.stacked.data.tolist()
        for p in params.steps:
            S = oracles.graph_step(S, p.w_in.data.tolist(), p.w_out.data.tolist(), p.w_r.data.tolist()).tolist()
        ref = oracles.sigmoid(oracles.dot(S[-1], params.head_w.data.tolist()) + float(params.head_b.data))
        assert float(sgr_score(nodes, params).data) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("steps", [1, 2, 3, 4])
    def test_rows_stochastic_and_shape_stable(self, rng, steps):
        nodes = _nodes(rng, 5, 6)
        state = reason(nodes, _params(rng, 6, steps))
        assert state.step == steps and len(state.edges) == steps
        assert state.nodes.shape == nodes.stacked.shape
        for E in state.edges:
            assert np.all(E.data >= 0)
            np.testing.assert_allclose(E.data.sum(axis=-1), 1.0, atol=1e-6)

    @given(st.integers(0, 2**31 - 1))
    def test_local_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        loc, glo = rng.standard_normal((5, 4)), rng.standard_normal(4)
        params = _params(rng, 4, 3)
        perm = rng.permutation(5)
        a = reason(build_nodes(Tensor(loc), Tensor(glo)), params)
        b = reason(build_nodes(Tensor(loc[perm]), Tensor(glo)), params)
        np.testing.assert_allclose(b.nodes.data[:5], a.nodes.data[:5][perm], atol=1e-10)
        sa = float(sgr_score(build_nodes(Tensor(loc), Tensor(glo)), params).data)
        sb = float(sgr_score(build_nodes(Tensor(loc[perm]), Tensor(glo)), params).data)
        assert sa == pytest.approx(sb, abs=1e-10)
        assert 0.0 < sa < 1.0

    def test_local_only_readout_is_node_mean(self, rng):
        loc = Tensor(rng.standard_normal((3, 4)))
        params = _params(rng, 4, 2)
        nodes = build_nodes(loc, None)
        final = reason(nodes, params).nodes.data.mean(axis=0)
        ref = oracles.sigmoid(final @ params.head_w.data + float(params.head_b.data))
        assert float(sgr_score(nodes, params).data) == pytest.approx(ref, abs=1e-12)

    def test_zero_steps_rejected(self, rng):
        with pytest.raises(ValueError):
            SgrParams.init(rng, 4, 0)

    def test_steps_do_not_share_parameters(self, rng):
        params = SgrParams.init(rng, 4, 3)
        assert len(params.named()) == 3 * 3 + 2
        assert not np.array_equal(params.steps[0].w_r.data, params.steps[1].w_r.data)
