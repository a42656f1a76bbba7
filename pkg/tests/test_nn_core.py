import numpy as np
import pytest
from hypothesis import given, strategies as st

from semcomm import nn_core
from semcomm.errors import ConfigurationError, TrainingError
from semcomm.nn_core import AdamState, MlpSpec


def test_param_count_matches_layout():
    spec = MlpSpec((3, 5, 2), ("relu", "softmax"))
    assert spec.n_params == (3 + 1) * 5 + (5 + 1) * 2
    assert [l.offset for l in spec.layers] == [0, 20]


@pytest.mark.parametrize("widths,acts", [
    ((3,), ()),
    ((3, 0, 2), ("relu", "linear")),
    ((3, 4, 2), ("softmax", "linear")),
    ((3, 2), ("tanh",)),
    ((3, 4, 2), ("relu",)),
])
def test_invalid_specs_rejected(widths, acts):
    with pytest.raises(ConfigurationError):
        MlpSpec(widths, acts)


def test_spec_dict_round_trip():
    spec = MlpSpec((4, 6, 3), ("relu", "softmax"))
    assert MlpSpec.from_dict(spec.to_dict()) == spec


def test_zero_linear_layer_gives_zero_output(rng):
    spec = MlpSpec((4, 3), ("linear",))
    out = nn_core.forward(np.zeros(spec.n_params), spec, rng.standard_normal((5, 4)))
    assert np.array_equal(out, np.zeros((5, 3)))


def test_uniform_softmax():
    spec = MlpSpec((2, 10), ("softmax",))
    out = nn_core.forward(np.zeros(spec.n_params), spec, np.ones((3, 2)))
    np.testing.assert_allclose(out, 0.1, rtol=0, atol=1e-15)


def test_two_layer_relu_matches_hand_chain():
    spec = MlpSpec((2, 3, 2), ("relu", "linear"))
    w1 = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, -1.0]])
    b1 = np.array([0.1, 0.2, -0.3])
    w2 = np.array([[1.0, 2.0], [-1.0, 0.5], [3.0, -2.0]])
    b2 = np.array([0.0, 1.0])
    params = np.concatenate([np.vstack([w1, b1]).ravel(), np.vstack([w2, b2]).ravel()])
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    # row 1: h = relu(1.1, 0.2, -1.8) = (1.1, 0.2, 0); out = (1.1 - 0.2, 2.2 + 0.1 + 1) = (0.9, 3.3)
    # row 2: h = relu(-0.9, 2.7, -1.3) = (0, 2.7, 0); out = (-2.7, 1.35 + 1) = (-2.7, 2.35)
    expected = np.array([[0.9, 3.3], [-2.7, 2.35]])
    np.testing.assert_allclose(nn_core.forward(params, spec, x), expected, rtol=0, atol=1e-12)


def test_shape_mismatch_is_configuration_error(rng):
    spec = MlpSpec((3, 2), ("linear",))
    params = np.zeros(spec.n_params)
    with pytest.raises(ConfigurationError):
        nn_core.forward(params, spec, np.zeros((4, 2)))
    with pytest.raises(ConfigurationError):
        nn_core.backward(params, spec, np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(ConfigurationError):
        nn_core.forward(np.zeros(3), spec, np.zeros((4, 3)))


def test_linear_layer_gradient_with_unit_upstream(rng):
    spec = MlpSpec((3, 2), ("linear",))
    x = rng.standard_normal((6, 3))
    g = nn_core.backward(rng.standard_normal(spec.n_params), spec, x, np.ones((6, 2)))
    expected_w = np.outer(x.sum(axis=0), np.ones(2))
    expected_b = np.full(2, 6.0)
    np.testing.assert_allclose(g.params, np.vstack([expected_w, expected_b]).ravel(), atol=1e-12)


def test_relu_subgradient_at_zero_is_zero():
    spec = MlpSpec((1, 1), ("relu",))
    params = np.array([1.0, 0.0])  # w = 1, b = 0
    g = nn_core.backward(params, spec, np.zeros((1, 1)), np.ones((1, 1)))
    assert np.array_equal(g.params, [0.0, 0.0])
    assert np.array_equal(g.input, [[0.0]])


@given(seed=st.integers(0, 2**32 - 1))
def test_backward_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    spec = nn_core.random_spec(rng)
    params = nn_core.init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
    x = rng.standard_normal((5, spec.in_width))
    up = rng.standard_normal((5, spec.out_width))
    g = nn_core.backward(params, spec, x, up)
    coords = rng.choice(spec.n_params, size=min(20, spec.n_params), replace=False)
    fd = nn_core.finite_difference(lambda p: float(np.sum(up * nn_core.forward(p, spec, x))), params, coords)
    assert np.max(nn_core.relative_error(g.params[coords], fd)) < 1e-4
    # input gradient, one coordinate per row
    for n in range(x.shape[0]):
        j = int(rng.integers(spec.in_width))

        def f(v, n=n, j=j):
            xx = x.copy()
            xx[n, j] = v[0]
            return float(np.sum(up * nn_core.forward(params, spec, xx)))

        fd_x = nn_core.finite_difference(f, np.array([x[n, j]]), [0])
        assert nn_core.relative_error(g.input[n, j], fd_x[0]) < 1e-4


@given(seed=st.integers(0, 2**32 - 1))
def test_per_sample_rows_sum_to_batch_gradient(seed):
    rng = np.random.default_rng(seed)
    spec = nn_core.random_spec(rng)
    params = nn_core.init_params(spec, rng)
    x = rng.standard_normal((7, spec.in_width))
    up = rng.standard_normal((7, spec.out_width))
    full = nn_core.backward(params, spec, x, up).params
    rows = nn_core.backward(params, spec, x, up, per_sample=True).params
    assert rows.shape == (7, spec.n_params)
    np.testing.assert_allclose(rows.sum(axis=0), full, rtol=1e-12, atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 12), scale=st.floats(0.1, 50.0))
def test_softmax_rows_are_distributions(seed, k, scale):
    rng = np.random.default_rng(seed)
    spec = MlpSpec((3, k), ("softmax",))
    out = nn_core.forward(scale * rng.standard_normal(spec.n_params), spec, rng.standard_normal((9, 3)))
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_init_params_he_scale_and_zero_bias(rng):
    spec = MlpSpec((200, 300), ("relu",))
    params = nn_core.init_params(spec, rng)
    w = nn_core.weights(params, spec.layers[0])
    assert np.array_equal(w[-1], np.zeros(300))
    assert abs(w[:-1].std() / np.sqrt(2.0 / 200) - 1.0) < 0.02


def test_adam_zero_gradient_is_fixed_point(rng):
    p = rng.standard_normal(5)
    state = AdamState.zeros(5)
    new, _ = nn_core.adam_step(p, np.zeros(5), state)
    assert np.array_equal(new, p)
    assert state.step_count == 1


def test_adam_first_step_closed_form(rng):
    p, g = rng.standard_normal(6), rng.standard_normal(6)
    state = AdamState.zeros(6, learning_rate=0.01)
    new, _ = nn_core.adam_step(p, g, state)
    # bias correction makes m_hat = g and v_hat = g^2 after one step
    np.testing.assert_allclose(new, p - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-15)


def test_adam_weight_decay_enters_gradient(rng):
    p, g = rng.standard_normal(4), rng.standard_normal(4)
    a = AdamState.zeros(4, weight_decay=1e-4)
    b = AdamState.zeros(4)
    np.testing.assert_allclose(nn_core.adam_step(p, g, a)[0], nn_core.adam_step(p, g + 1e-4 * p, b)[0], rtol=0,
                               atol=1e-15)


def test_adam_second_step_against_recurrence():
    p = np.array([1.0, -2.0])
    g1, g2 = np.array([0.5, -1.0]), np.array([0.25, 2.0])
    state = AdamState.zeros(2, learning_rate=0.1)
    p1, _ = nn_core.adam_step(p, g1, state)
    p2, _ = nn_core.adam_step(p1, g2, state)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    np.testing.assert_allclose(p2, p1 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-13)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(TrainingError, match="non-finite gradient"):
        nn_core.adam_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), AdamState.zeros(3))


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"beta1": 1.0}, {"beta2": -0.1}, {"epsilon": 0},
                                {"weight_decay": -1}])
def test_adam_state_validation(kw):
    with pytest.raises(ConfigurationError):
        AdamState.zeros(2, **kw)


def test_adam_state_copy_is_independent():
    s = AdamState.zeros(3)
    c = s.copy()
    c.first_moment[0] = 1.0
    assert s.first_moment[0] == 0.0
