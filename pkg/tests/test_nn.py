import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sgraf import tensor as T
from sgraf.nn import INFERENCE, TRAINING, AdamState, BatchNormState, adam_step, batch_norm, piecewise_lr, uniform_init
from sgraf.tensor import Tensor

from oracles import batch_norm_train, numeric_grad


def affine(c=1, gamma=1.0, beta=0.0):
    return Tensor(np.full(c, gamma), requires_grad=True), Tensor(np.full(c, beta), requires_grad=True)


class TestBatchNorm:
    def test_hand_evaluated_two_samples(self):
        out = batch_norm(Tensor([[1.0], [3.0]]), BatchNormState(1), *affine())
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-7)

    def test_already_normalized_input_passes_through(self, rng):
        x = rng.standard_normal((50, 3))
        x = (x - x.mean(0)) / x.std(0)
        out = batch_norm(Tensor(x), BatchNormState(3), *affine(3))
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_inference_with_identity_statistics_is_exact(self, rng):
        x = rng.standard_normal((4, 2))
        state = BatchNormState(2, epsilon=0.0, mode=INFERENCE)
        np.testing.assert_array_equal(batch_norm(Tensor(x), state, *affine(2)).data, x)

    def test_matches_scalar_oracle_and_updates_running_stats(self, rng):
        x = rng.standard_normal(7) * 2 + 1
        state = BatchNormState(1, momentum=0.1)
        out = batch_norm(Tensor(x[:, None]), state, *affine(1, 1.5, -0.2))
        ref, mu, var = batch_norm_train(list(x), 1.5, -0.2, 1e-8)
        np.testing.assert_allclose(out.data.ravel(), ref, rtol=1e-12)
        np.testing.assert_allclose(state.running_mean, [0.1 * mu], rtol=1e-12)
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * var], rtol=1e-12)

    def test_inference_uses_running_statistics(self):
        state = BatchNormState(1, mode=INFERENCE, running_mean=np.array([2.0]), running_var=np.array([4.0]))
        out = batch_norm(Tensor([[4.0], [0.0]]), state, *affine())
        np.testing.assert_allclose(out.data.ravel(), [1.0, -1.0], atol=1e-8)
        np.testing.assert_array_equal(state.running_mean, [2.0])

    def test_single_sample_in_training_mode_rejected(self):
        with pytest.raises(ValueError):
            batch_norm(Tensor([[1.0]]), BatchNormState(1), *affine())

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            batch_norm(Tensor(np.ones((3, 2))), BatchNormState(1), *affine())

    def test_grouped_statistics_normalize_each_group(self, rng):
        x = rng.standard_normal((3, 5, 1)) + np.arange(3)[:, None, None] * 10
        out = batch_norm(Tensor(x), BatchNormState(1), *affine(), axes=(-2,)).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("mode,axes", [(TRAINING, None), (TRAINING, (-2,)), (INFERENCE, None)])
    def test_gradients_match_finite_differences(self, rng, mode, axes):
        x = rng.standard_normal((2, 4, 1))
        w = rng.standard_normal(x.shape)

        def run(xv, gv, bv):
            state = BatchNormState(1, mode=mode, running_mean=np.array([0.3]), running_var=np.array([1.7]))
            return batch_norm(xv, state, gv, bv, axes=axes)

        xt, (g, b) = Tensor(x, requires_grad=True), affine(1, 1.3, 0.4)
        T.tsum(T.mul(run(xt, g, b), w)).backward()
        f = lambda v: float((run(Tensor(v), Tensor([1.3]), Tensor([0.4])).data * w).sum())
        np.testing.assert_allclose(xt.grad, numeric_grad(f, x), rtol=1e-5, atol=1e-7)
        fg = lambda v: float((run(Tensor(x), Tensor(v), Tensor([0.4])).data * w).sum())
        np.testing.assert_allclose(g.grad, numeric_grad(fg, np.array([1.3])), rtol=1e-6)

    @given(hnp.arrays(np.float64, (6, 2), elements=st.floats(-100, 100)))
    def test_training_output_standardized(self, x):
        if np.any(x.std(axis=0) < 1e-2):
            return
        out = batch_norm(Tensor(x), BatchNormState(2), *affine(2)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-6)
        var = x.var(axis=0)
        np.testing.assert_allclose(out.var(axis=0), var / (var + BatchNormState(2).epsilon), atol=1e-9)

    def test_running_variance_stays_non_negative(self, rng):
        state = BatchNormState(2)
        for _ in range(20):
            batch_norm(Tensor(rng.standard_normal((3, 2)) * rng.uniform(0, 5)), state, *affine(2))
        assert np.all(state.running_var >= 0)


def adam_reference(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self, rng):
        p = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        before = p.data.copy()
        state = AdamState(learning_rate=0.1)
        for _ in range(5):
            adam_step({"p": p}, {"p": np.zeros((3, 2))}, state)
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 5

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e6])
    def test_first_step_moves_by_learning_rate(self, scale):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        adam_step({"p": p}, {"p": np.array([scale, -scale])}, AdamState(learning_rate=0.01))
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-5)

    def test_matches_textbook_recursion(self, rng):
        grads = rng.standard_normal(10)
        p = Tensor(np.array(0.5), requires_grad=True)
        state = AdamState(learning_rate=0.05)
        for g in grads:
            adam_step({"w": p}, {"w": np.array(g)}, state)
        assert float(p.data) == pytest.approx(adam_reference(0.5, grads, 0.05), rel=1e-12)

    def test_converges_on_quadratic(self):
        w = Tensor(np.array(0.0), requires_grad=True)
        state = AdamState(learning_rate=0.1)
        for _ in range(2000):
            w.zero_grad()
            T.square(T.sub(w, 3.0)).backward()
            adam_step({"w": w}, {"w": w.grad}, state)
        assert abs(float(w.data) - 3.0) < 1e-3

    def test_shape_mismatch_rejected_before_any_update(self):
        a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(3), requires_grad=True)
        state = AdamState()
        with pytest.raises(ValueError):
            adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.ones(2)}, state)
        assert state.step == 0
        np.testing.assert_array_equal(a.data, 0.0)


class TestSchedulesAndInit:
    def test_piecewise_decay(self):
        assert piecewise_lr(2e-4, 0, (10,)) == 2e-4
        assert piecewise_lr(2e-4, 9, (10,)) == 2e-4
        assert piecewise_lr(2e-4, 10, (10,)) == pytest.approx(2e-5)
        assert piecewise_lr(1.0, 25, (10, 20), 0.5) == 0.25

    def test_uniform_init_bounds(self, rng):
        w = uniform_init(rng, (200, 16), 16)
        assert w.requires_grad
        assert np.abs(w.data).max() <= 0.25
        assert np.abs(w.data).max() > 0.24
