import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newsrl import tensor as T
from newsrl.gradcheck import check_network
from newsrl.networks import (Lstm, LstmConfig, Mlp, MlpConfig, Transformer, TransformerConfig, build_network,
                             load_checkpoint, save_checkpoint)

F = 6


def all_nets():
    return [Mlp(MlpConfig(8, 8), F), Lstm(LstmConfig(hidden=8, window=4), F),
            Transformer(TransformerConfig(layers=1, heads=2, model_dim=8, ff_dim=16, window=4), F)]


@pytest.mark.parametrize("net", all_nets(), ids=lambda n: n.kind)
def test_init_is_deterministic_per_seed(net):
    a, b, c = net.init_params(3), net.init_params(3), net.init_params(4)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("net", all_nets(), ids=lambda n: n.kind)
def test_output_shapes(net):
    p = net.init_params(0)
    x = np.random.default_rng(0).normal(size=(5, net.window, F))
    assert net.scores(p, x).shape == (5, 3)
    assert net.scores(p, x[0]).shape == (3,)
    with pytest.raises(T.ShapeError):
        net.scores(p, np.zeros((5, net.window + 1, F)))


def test_mlp_zero_weights_output_bias():
    net = Mlp(MlpConfig(4, 4), F)
    p = {k: np.zeros_like(v) for k, v in net.init_params(0).items()}
    p["head.b"] = np.array([0.5, -1.0, 2.0])
    for x in np.random.default_rng(1).normal(size=(4, F)):
        np.testing.assert_array_equal(net.scores(p, x), p["head.b"])


def test_mlp_hand_computed():
    net = Mlp(MlpConfig(2, 2), 2)
    p = {"mlp.w1": np.array([[1.0, 0.0], [0.0, 1.0]]), "mlp.b1": np.zeros(2),
         "mlp.w2": np.array([[1.0, -1.0], [1.0, 1.0]]), "mlp.b2": np.array([0.0, 0.5]),
         "head.w": np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]), "head.b": np.array([0.0, 0.0, 0.1])}
    x = np.array([0.3, -0.2])
    h1 = np.tanh(x)
    h2 = np.tanh(h1 @ p["mlp.w2"] + p["mlp.b2"])
    want = [h2[0], h2[1], 2 * h2[0] - h2[1] + 0.1]
    np.testing.assert_allclose(net.scores(p, x), want, rtol=1e-14)


def test_mlp_reads_only_last_row():
    net = Mlp(MlpConfig(4, 4), F)
    p = net.init_params(0)
    x = np.random.default_rng(2).normal(size=(3, 1, F))
    np.testing.assert_array_equal(net.scores(p, x), net.scores(p, x[:, -1:, :]))


def test_lstm_forget_bias_is_one():
    net = Lstm(LstmConfig(hidden=5, window=3), F)
    b = net.init_params(0)["lstm0.b"]
    np.testing.assert_array_equal(b[5:10], np.ones(5))
    np.testing.assert_array_equal(np.delete(b, range(5, 10)), np.zeros(15))


def test_lstm_saturated_forget_gate_forgets_early_rows():
    net = Lstm(LstmConfig(hidden=4, window=5), F)
    p = net.init_params(0)
    p["lstm0.b"][4:8] = -50.0  # forget gate closed
    p["lstm0.wh"][:] = 0.0  # no path through the hidden state either
    x = np.random.default_rng(3).normal(size=(2, 5, F))
    y = x.copy()
    y[:, 0, :] += 10.0
    np.testing.assert_allclose(net.scores(p, x), net.scores(p, y), atol=1e-9)


def test_lstm_constant_input_reaches_fixed_point():
    params = Lstm(LstmConfig(hidden=3, window=1), 2).init_params(1)
    x = np.full((1, 300, 2), 0.4)
    long_run = Lstm(LstmConfig(hidden=3, window=300), 2).scores(params, x)
    longer = Lstm(LstmConfig(hidden=3, window=200), 2).scores(params, x[:, :200])
    np.testing.assert_allclose(long_run, longer, atol=1e-9)


def test_transformer_head_dim_and_divisibility():
    assert TransformerConfig(heads=4, model_dim=32).head_dim == 8
    with pytest.raises(ValueError):
        TransformerConfig(heads=3, model_dim=32)


def test_transformer_positional_init_std():
    net = Transformer(TransformerConfig(model_dim=64, window=64, pos_init_std=0.1), F)
    pos = net.init_params(0)["tf.pos"]
    assert abs(pos.std() - 0.1) < 0.005


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_attention_weights_are_distributions(seed):
    net = Transformer(TransformerConfig(layers=1, heads=2, model_dim=8, ff_dim=8, window=5), F)
    p = net.init_params(seed)
    x = np.random.default_rng(seed).normal(size=(3, 5, 8))
    with T.Tape():
        _, w = net.attention(p, "tf0.", T.Tensor(x))
    assert w.shape == (3, 2, 5, 5)
    assert (w.value >= 0).all()
    np.testing.assert_allclose(w.value.sum(-1), 1.0, atol=1e-12)


def test_transformer_is_order_sensitive():
    net = Transformer(TransformerConfig(layers=1, heads=2, model_dim=8, ff_dim=8, window=4), F)
    p = net.init_params(0)
    x = np.random.default_rng(4).normal(size=(1, 4, F))
    swapped = x[:, [1, 0, 2, 3], :]
    assert not np.allclose(net.scores(p, x), net.scores(p, swapped))


@pytest.mark.parametrize("net", all_nets(), ids=lambda n: n.kind)
def test_gradients_match_finite_differences(net):
    assert check_network(net, seed=0) < 1e-4


@pytest.mark.parametrize("net", all_nets(), ids=lambda n: n.kind)
def test_checkpoint_round_trip(net, tmp_path):
    p = net.init_params(5)
    save_checkpoint(tmp_path / "c.json", net, p, {"trial": 3})
    net2, p2, extra = load_checkpoint(tmp_path / "c.json")
    assert net2.header() == net.header() and extra == {"trial": 3}
    x = np.random.default_rng(5).normal(size=(2, net.window, F))
    np.testing.assert_array_equal(net.scores(p, x), net2.scores(p2, x))


def test_build_network_dispatches_on_kind():
    assert isinstance(build_network(LstmConfig(), 4), Lstm)
    assert isinstance(build_network(MlpConfig(), 4), Mlp)
