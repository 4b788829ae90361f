from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gzslroute.models import (
    Adam, AdamState, MlpSpec, Network, adam_step, backward, forward, forward_cache, init_mlp,
    input_gradient, load_checkpoint, log_softmax, save_checkpoint, softmax,
)
from oracles import central_diff, params_rel_err, rel_err


def test_param_count_small_spec():
    # 3*8+8 + 8*2+2
    assert MlpSpec((3, 8, 2)).n_params == 50
    assert MlpSpec((4, 5, 3, 1)).n_params == 4 * 5 + 5 + 5 * 3 + 3 + 3 + 1


@pytest.mark.parametrize("bad", [dict(layer_sizes=(3,)), dict(layer_sizes=(3, 0)),
                                 dict(layer_sizes=(2, 2), hidden_activation="tanh"),
                                 dict(layer_sizes=(2, 2), output_activation="sigmoid")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        MlpSpec(**bad)


def test_glorot_bounds_and_zero_biases():
    params = init_mlp(MlpSpec((10, 30, 5)), 0)
    assert np.abs(params[0]).max() <= np.sqrt(6 / 40)
    assert np.abs(params[2]).max() <= np.sqrt(6 / 35)
    assert not params[1].any() and not params[3].any()


def test_init_is_deterministic():
    a, b = init_mlp(MlpSpec((4, 6, 2)), 9), init_mlp(MlpSpec((4, 6, 2)), 9)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p, q)


def test_input_width_mismatch_is_reported():
    net = Network.init(MlpSpec((3, 2)), 0)
    with pytest.raises(ValueError, match="input width mismatch"):
        net(np.ones((1, 4)))


def test_softmax_output_rows_sum_to_one(rng):
    net = Network.init(MlpSpec((3, 4, 5), output_activation="softmax"), 0)
    p = net(rng.standard_normal((7, 3)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_log_softmax_matches_log_of_softmax(rng):
    z = rng.standard_normal((4, 6)) * 30
    np.testing.assert_allclose(log_softmax(z), np.log(softmax(z)), atol=1e-10)


@pytest.mark.parametrize("act", ["relu", "leaky_relu"])
def test_backward_matches_finite_differences(act, rng):
    spec = MlpSpec((3, 5, 4, 2), act)
    params = init_mlp(spec, 1)
    for p in params[1::2]:
        p += rng.normal(0, 0.1, p.shape)
    x = rng.standard_normal((6, 3))
    w = rng.standard_normal((6, 2))
    f = lambda: float((forward(params, spec, x) * w).sum())
    _, cache = forward_cache(params, spec, x)
    grads, gx = backward(params, spec, cache, w)
    assert params_rel_err(f, params, grads) < 1e-6
    assert rel_err(central_diff(f, x), gx) < 1e-6


def test_input_gradient_of_linear_net_is_weight_column():
    spec = MlpSpec((3, 1))
    params = [np.array([[1.0], [-2.0], [0.5]]), np.zeros(1)]
    np.testing.assert_allclose(input_gradient(params, spec, np.ones((2, 3))), [[1, -2, 0.5]] * 2)


def test_adam_first_step_moves_each_weight_by_lr():
    params = [np.array([1.0, -2.0, 3.0])]
    grads = [np.array([0.3, -5.0, 1e-3])]
    new, state = adam_step(params, grads, AdamState.zeros_like(params), 0.01)
    np.testing.assert_allclose(new[0], params[0] - 0.01 * np.sign(grads[0]), atol=1e-7)
    assert state.t == 1


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(2)], AdamState.zeros_like([np.zeros(3)]), 0.1)
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [], AdamState.zeros_like([np.zeros(3)]), 0.1)


def test_adam_minimizes_a_quadratic():
    x = [np.array([5.0, -3.0])]
    opt = Adam(x, 0.1)
    for _ in range(500):
        x = opt.step(x, [2 * x[0]])
    assert np.abs(x[0]).max() < 0.05


def test_checkpoint_round_trip(tmp_path):
    net = Network.init(MlpSpec((4, 6, 3), "leaky_relu", "softmax"), 2)
    save_checkpoint(net, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.spec == net.spec
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_allclose(back(x), net(x), atol=1e-6)


def test_truncated_checkpoint_rejected(tmp_path):
    save_checkpoint(Network.init(MlpSpec((4, 3)), 0), tmp_path)
    p = tmp_path / "params.f32"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="size mismatch"):
        load_checkpoint(tmp_path)


@settings(max_examples=30, deadline=None)
@given(z=st.lists(st.floats(-50, 50), min_size=2, max_size=8), shift=st.floats(-100, 100))
def test_softmax_shift_invariant(z, shift):
    z = np.array([z])
    np.testing.assert_allclose(softmax(z), softmax(z + shift), atol=1e-9)
