import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irmlab.host import ConfigError, InjectionPlan
from irmlab.irm import IrmConfig, IrmNet, init_irm, irm_forward
from irmlab.numerics import Tensor


def cfg(d=4, plan=(0, 2), hidden=(3, 5, 5, 3)):
    return IrmConfig(d, InjectionPlan(plan), hidden)


def test_output_dim_and_layers():
    c = cfg()
    assert c.output_dim == 8
    assert c.layer_dims == [(4, 3), (3, 5), (5, 5), (5, 3), (3, 8)]


def test_hidden_layer_count_enforced():
    with pytest.raises(ConfigError):
        IrmConfig(4, InjectionPlan((0,)), (3, 3, 3))


def test_config_round_trip():
    c = cfg()
    assert IrmConfig.from_dict(c.to_dict()) == c


def test_all_zero_net_gives_zero_matrix():
    c = cfg()
    net = IrmNet(c, [Tensor(np.zeros((o, i))) for i, o in c.layer_dims],
                 [Tensor(np.zeros(o)) for _, o in c.layer_dims])
    assert not irm_forward(np.arange(4.0), net).values.any()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=4), st.integers(0, 2**32 - 1))
def test_shape_contract_and_fresh_net_is_zero(a0, seed):
    net = init_irm(cfg(), seed)
    m = irm_forward(np.array(a0), net, step=3)
    assert m.values.shape == (2, 4) and m.step == 3 and m.plan == net.plan
    assert not m.values.any()


def test_wrong_input_shape():
    with pytest.raises(ValueError):
        init_irm(cfg(), 0).forward(np.zeros(5))


def test_hand_computed_chain():
    # 2 -> 2 -> 2 -> 2 -> 2 -> 4 with plan of two blocks over d_model = 2
    c = IrmConfig(2, InjectionPlan((0, 1)), (2, 2, 2, 2))
    W = [np.array([[1.0, -1.0], [2.0, 0.0]]),
         np.array([[1.0, 1.0], [0.0, -1.0]]),
         np.eye(2),
         np.array([[0.5, 0.0], [0.0, 2.0]]),
         np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 2.0]])]
    b = [np.array([0.0, -1.0]), np.zeros(2), np.array([0.0, 1.0]), np.zeros(2), np.array([0.0, 0.0, 0.0, 3.0])]
    net = IrmNet(c, [Tensor(w) for w in W], [Tensor(v) for v in b])
    # a0 = [3, 1]: h1 = relu([2, 5]) = [2, 5]; h2 = relu([7, -5]) = [7, 0];
    # h3 = relu([7, 1]) = [7, 1]; h4 = [3.5, 2]; out = [3.5, 2, 5.5, 3.5]
    out = irm_forward(np.array([3.0, 1.0]), net).values
    np.testing.assert_array_equal(out, [[3.5, 2.0], [5.5, 3.5]])


def test_apply_matches_forward_batched(rng):
    net = init_irm(cfg(), 4)
    net.weights[-1].data[...] = rng.normal(size=net.weights[-1].shape)
    a = rng.normal(size=(2, 3, 4))
    batched = net.apply(Tensor(a)).data
    assert batched.shape == (2, 3, 2, 4)
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(batched[i, j], net.forward(a[i, j]), rtol=0, atol=1e-13)


def test_init_determinism_and_seed_sensitivity():
    a, b, c = init_irm(cfg(), 42), init_irm(cfg(), 42), init_irm(cfg(), 420)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa.data, wb.data)
    assert any(not np.array_equal(wa.data, wc.data) for wa, wc in zip(a.weights[:4], c.weights[:4]))


def test_uniform_bounds_and_zero_final_layer():
    net = init_irm(cfg(d=16, hidden=(32, 32, 32, 32)), 1)
    for (fan_in, _), w in zip(net.config.layer_dims[:4], net.weights[:4]):
        assert np.abs(w.data).max() <= 1 / np.sqrt(fan_in)
    assert not net.weights[4].data.any() and not net.biases[4].data.any()


def test_parameter_count_logged(caplog):
    with caplog.at_level("INFO", logger="irmlab.irm"):
        net = init_irm(cfg(), 0)
    assert str(net.n_params) in caplog.text
    assert net.n_params == sum(i * o + o for i, o in net.config.layer_dims)
