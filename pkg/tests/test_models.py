import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmpdd.data import Dataset
from fedmpdd.models import (
    MLP1,
    Batch,
    Logistic,
    ModelState,
    central_difference,
    evaluate,
    finite_diff_grad,
    init_state,
    loss_and_grad,
    sgd_step,
)

MODELS = [Logistic(3, 4), Logistic(2, 1), MLP1(5, 3, 4), MLP1(2, 4, 3)]


def random_case(model, rng, n=None):
    n = n or int(rng.integers(1, 6))
    state = ModelState(rng.normal(0, 0.7, model.num_params))
    batch = Batch(rng.normal(0, 1.5, (n, model.input_dim)), rng.integers(0, model.classes, n))
    return state, batch


class TestLossAndGrad:
    def test_param_counts(self):
        assert Logistic(10, 784).num_params == 10 * 785
        assert MLP1(7, 3, 5).num_params == 7 * 6 + 3 * 8

    def test_uniform_softmax_loss(self):
        model = Logistic(2, 3)
        batch = Batch(np.random.default_rng(0).normal(size=(5, 3)), [0, 1, 1, 0, 1])
        loss, _ = loss_and_grad(model, ModelState.zeros(model.num_params), batch)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_bias_gradient_at_zero(self):
        model = Logistic(4, 2)
        loss, grad = loss_and_grad(model, ModelState.zeros(12), Batch([[0.3, -1.0]], [2]))
        bias = grad[8:]
        assert bias[2] == pytest.approx(1 / 4 - 1)
        assert np.allclose(np.delete(bias, 2), 1 / 4)

    @pytest.mark.parametrize("model", MODELS, ids=repr)
    def test_matches_finite_differences(self, model):
        rng = np.random.default_rng(11)
        for _ in range(100):
            state, batch = random_case(model, rng)
            _, grad = loss_and_grad(model, state, batch)
            fd = finite_diff_grad(model, state, batch, h=1e-5)
            assert np.max(np.abs(grad - fd)) < 1e-4

    def test_pure(self):
        model = MLP1(4, 3, 2)
        state, batch = random_case(model, np.random.default_rng(1))
        a = loss_and_grad(model, state, batch)
        b = loss_and_grad(model, state, batch)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            loss_and_grad(Logistic(2, 3), ModelState.zeros(5), Batch([[1.0, 2.0, 3.0]], [0]))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((0, 3)), np.zeros(0))

    def test_large_logits_stay_finite(self):
        model = Logistic(3, 1)
        state = ModelState(np.array([1e4, -1e4, 0, 0, 0, 0.0]))
        loss, grad = loss_and_grad(model, state, Batch([[5.0]], [1]))
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestFiniteDiff:
    def test_quadratic(self):
        fd = central_difference(lambda x: float(x @ x), np.array([1.0, 2.0]), 1e-5)
        assert np.allclose(fd, [2.0, 4.0], atol=1e-6)

    @pytest.mark.parametrize("h", [0.0, -1e-3])
    def test_rejects_nonpositive_step(self, h):
        model = Logistic(2, 1)
        with pytest.raises(ValueError):
            finite_diff_grad(model, ModelState.zeros(4), Batch([[1.0]], [0]), h=h)


class TestSgdStep:
    def test_arithmetic(self):
        out = sgd_step(ModelState(np.array([1.0, 1.0])), np.array([1.0, -1.0]), 0.5)
        assert np.array_equal(out.params, [0.5, 1.5])

    def test_zero_estimate(self):
        x = ModelState(np.array([3.0, -2.0]))
        assert np.array_equal(sgd_step(x, np.zeros(2), 0.1).params, x.params)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(ModelState.zeros(2), np.zeros(3), 0.1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    def test_descends_quadratic(self, xs):
        x = np.array(xs)
        if x @ x < 1e-100:  # squares underflow
            return
        nxt = sgd_step(ModelState(x), 2 * x, 1e-3).params
        assert nxt @ nxt < x @ x

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            sgd_step(ModelState.zeros(1), np.array([np.inf]), 0.1)


class TestEvaluate:
    def test_separable_toy(self):
        model = Logistic(2, 1)
        # logits (-x, x): class 1 iff x > 0
        state = ModelState(np.array([-1.0, 1.0, 0.0, 0.0]))
        ds = Dataset([[-2.0], [-1.0], [1.0], [3.0]], [0, 0, 1, 1], 2)
        loss, acc = evaluate(model, state, ds)
        assert acc == 1.0
        assert loss < math.log(2)

    def test_zero_params_tie_break(self):
        model = Logistic(2, 2)
        ds = Dataset(np.random.default_rng(0).normal(size=(10, 2)), [0, 1] * 5, 2)
        loss, acc = evaluate(model, ModelState.zeros(6), ds)
        # every prediction is class 0 on exact ties
        assert acc == 0.5
        assert loss == pytest.approx(math.log(2))

    def test_loss_ln_c(self):
        model = MLP1(3, 5, 2)
        ds = Dataset(np.ones((4, 2)), [0, 1, 2, 3], 5)
        loss, _ = evaluate(model, ModelState.zeros(model.num_params), ds)
        assert loss == pytest.approx(math.log(5))

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(Logistic(2, 1), ModelState.zeros(4), Dataset(np.zeros((0, 1)), [], 2))


def test_model_state_rejects_nan():
    with pytest.raises(ValueError):
        ModelState(np.array([0.0, np.nan]))


def test_init_state_scale():
    s = init_state(Logistic(2, 3), seed=4, scale=0.1)
    assert s.dim == 8 and np.std(s.params) > 0
