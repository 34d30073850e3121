import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcsguard.errors import ConfigError, DataFault, NumericalFault, TrainingFault
from evcsguard.nn import (AdamState, ModelCheckpoint, Network, NetworkSpec, TrainConfig, adam_step, bce_loss,
                          classify, convlstm_spec, grad_check, lstm_spec, predict, train)
from evcsguard.nn import layers as L
from evcsguard.nn.network import backward, build, forward


def dense_net(seed=0):
    return Network(NetworkSpec("custom", [
        {"type": "flatten"}, {"type": "dense", "units": 10}, {"type": "leaky_relu"},
        {"type": "batchnorm"}, {"type": "dense", "units": 1}, {"type": "sigmoid"}], (8, 3),
        {"std": 0.3, "seed": seed}))


def lstm_net(units=4, seed=0):
    return Network(NetworkSpec("custom", [
        {"type": "lstm", "units": units, "return_sequences": True}, {"type": "dense", "units": 3},
        {"type": "leaky_relu"}, {"type": "batchnorm"}, {"type": "dropout", "rate": 0.2}, {"type": "flatten"},
        {"type": "dense", "units": 1}, {"type": "sigmoid"}], (8, 2), {"std": 0.3, "seed": seed}))


def convlstm_net(seed=0):
    return Network(NetworkSpec("custom", [
        {"type": "reshape", "target": [4, 6, 2, 1]},
        {"type": "convlstm2d", "filters": 2, "kernel": [3, 3], "return_sequences": True},
        {"type": "batchnorm"}, {"type": "dropout", "rate": 0.2},
        {"type": "convlstm2d", "filters": 2, "kernel": [3, 3], "return_sequences": False},
        {"type": "flatten"}, {"type": "dense", "units": 1}, {"type": "sigmoid"}], (24, 2),
        {"std": 0.3, "seed": seed}))


def batch(shape, n=6, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n,) + shape), (np.arange(n) % 2).astype(float)


def test_truncated_normal_bounds():
    w = L.truncated_normal(np.random.default_rng(0), (20000,))
    assert np.abs(w).max() <= 0.1 and abs(w.std() - 0.05) < 0.01


def test_sigmoid_strictly_inside_after_clamp():
    p = L.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert p[1] == 0.5 and np.all(np.isfinite(p))
    assert bce_loss(p, np.array([1.0, 1.0, 0.0])) < 20


def test_grad_check_dense():
    x, y = batch((8, 3))
    err, per, counts = grad_check(dense_net(), x, y)
    assert err < 1e-6 and counts["dense"] >= 200


def test_grad_check_lstm_small():
    x, y = batch((8, 2))
    err, per, counts = grad_check(lstm_net(4), x, y)
    assert per["lstm"] < 1e-4 and counts["lstm"] == 112


def test_grad_check_convlstm_small():
    x, y = batch((24, 2))
    err, per, counts = grad_check(convlstm_net(), x, y)
    assert per["convlstm2d"] < 1e-4 and counts["convlstm2d"] >= 200
    assert per["batchnorm"] < 1e-4


def test_infer_deterministic_and_train_needs_cache():
    net = lstm_net()
    x, _ = batch((8, 2))
    assert np.array_equal(forward(net, x, "infer"), forward(net, x, "infer"))
    with pytest.raises(ConfigError):
        backward(net, np.full(6, 0.5), np.zeros(6))
    with pytest.raises(ConfigError):
        forward(net, x, "eval")


def test_zero_final_dense_gives_half():
    net = dense_net()
    net.layers[-2].params["W"][:] = 0.0
    net.layers[-2].params["b"][:] = 0.0
    x, _ = batch((8, 3))
    assert np.all(net.forward(x) == 0.5)


def test_batchnorm_normalises_in_train_mode():
    net = dense_net()
    x, _ = batch((8, 3), n=32)
    net.forward(x, True, np.random.default_rng(0))
    bn = net.layers[3]
    xh = bn.last_xhat
    assert np.abs(xh.mean(axis=0)).max() < 1e-6
    assert np.abs(xh.var(axis=0) - 1.0).max() < 1e-6


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        dense_net().forward(np.zeros((2, 7, 3)))


def test_bce_values():
    assert bce_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(np.log(2), abs=1e-12)
    assert bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) < 1e-6
    with pytest.raises(ConfigError):
        bce_loss(np.array([0.5]), np.array([1.0, 0.0]))


@given(st.floats(1e-6, 1 - 1e-6))
def test_bce_symmetry(p):
    assert bce_loss(np.array([p]), np.array([1.0])) == pytest.approx(bce_loss(np.array([1 - p]), np.array([0.0])))


def test_final_bias_gradient_is_p_minus_y():
    net = lstm_net()
    x, _ = batch((8, 2), n=1)
    p = net.forward(x, True, np.random.default_rng(0))
    g = net.backward(p, np.array([1.0]))
    name = [k for k in g if k.endswith("dense.b")][-1]
    assert g[name][0] == pytest.approx(p[0] - 1.0, abs=1e-15)


def test_zero_input_zero_recurrent_gives_zero_input_grads():
    layer = L.LSTM(3)
    layer.build((5, 2), np.random.default_rng(0))
    layer.params["Wh"][:] = 0.0
    layer.forward(np.zeros((4, 5, 2)), True)
    layer.backward(np.random.default_rng(1).normal(size=(4, 5, 3)))
    assert np.all(layer.grads["Wx"] == 0.0)


def test_convlstm_1x1_matches_lstm():
    rng = np.random.default_rng(4)
    lstm = L.LSTM(3, return_sequences=True)
    lstm.build((7, 2), rng)
    conv = L.ConvLSTM2D(3, (1, 1), return_sequences=True)
    conv.build((7, 1, 1, 2), rng)
    for k in ("Wx", "Wh", "b"):
        lstm.params[k] = rng.normal(size=lstm.params[k].shape)
        conv.params[k] = lstm.params[k].copy()
    x = rng.normal(size=(5, 7, 2))
    a = lstm.forward(x)
    b = conv.forward(x.reshape(5, 7, 1, 1, 2)).reshape(5, 7, 3)
    assert np.abs(a - b).max() < 1e-10


def test_im2col_col2im_adjoint():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 2, 3))
    c = rng.normal(size=(2, 5, 2, 4 * 3 * 3))
    lhs = np.sum(L.im2col(x, 4, 3) * c)
    rhs = np.sum(x * L.col2im(c, x.shape, 4, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_adam_first_step_is_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    adam_step(p, g, AdamState(), TrainConfig(learning_rate=0.01))
    assert np.allclose(p["w"], np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g["w"]), atol=1e-7)


def test_adam_zero_gradient_noop():
    p = {"w": np.array([1.0, 2.0])}
    st_ = AdamState()
    for _ in range(50):
        adam_step(p, {"w": np.zeros(2)}, st_, TrainConfig())
    assert np.array_equal(p["w"], [1.0, 2.0])


def test_adam_quadratic():
    # reference iteration by hand: m, v moments with bias correction on f(x) = x^2
    x = {"x": np.array([1.0])}
    st_ = AdamState()
    m = v = 0.0
    ref = 1.0
    for t in range(1, 101):
        adam_step(x, {"x": 2 * x["x"]}, st_, TrainConfig(learning_rate=0.1))
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert x["x"][0] == pytest.approx(ref, abs=1e-12)
    assert abs(x["x"][0]) < 0.02


def test_adam_shape_mismatch():
    with pytest.raises(ConfigError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), TrainConfig())


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(dropout_rate=1.0), dict(batch_size=0), dict(epochs=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_overfit_sixteen_samples():
    x, y = batch((8, 3), n=16, seed=3)
    spec = dense_net().spec
    ck, hist = train(spec, (x, y), TrainConfig(learning_rate=0.05, dropout_rate=0.0, batch_size=16, epochs=150))
    p = ck.network().forward(x)
    assert np.all(classify(p) == y)
    assert hist[-1] < hist[0]


def test_training_deterministic():
    x, y = batch((8, 2), n=20)
    cfg = TrainConfig(learning_rate=0.01, batch_size=8, epochs=2, seed=5)
    a = train(lstm_net().spec, (x, y), cfg)[1]
    b = train(lstm_net().spec, (x, y), cfg)[1]
    assert a == b


def test_training_divergence_names_epoch():
    x, y = batch((8, 3), n=8)
    x[0, 0, 0] = np.nan
    with pytest.raises(TrainingFault) as exc:
        train(dense_net().spec, (x, y), TrainConfig(epochs=2))
    assert exc.value.epoch == 1


def test_reference_lstm_config_accepted():
    x, y = batch((240, 2), n=4)
    spec = lstm_spec(146, 180, 32, 0.34)
    ck, hist = train(spec, (x, y), TrainConfig(0.014717, 0.34, 56, 1))
    assert len(hist) == 1 and ck.network().n_params() > 0


def test_convlstm_spec_shapes():
    net = build(convlstm_spec(4, (6, 6), 8, (5, 5), 32, 0.2))
    x, _ = batch((240, 2), n=2)
    p = net.forward(x)
    assert p.shape == (2,) and np.all((p > 0) & (p < 1))


def test_spec_must_end_in_sigmoid():
    with pytest.raises(ConfigError):
        Network(NetworkSpec("x", [{"type": "flatten"}, {"type": "dense", "units": 1}], (4, 2)))
    with pytest.raises(ConfigError):
        Network(NetworkSpec("x", [{"type": "conv9"}], (4, 2)))


def test_predict_and_latency():
    net = lstm_net()
    ck = ModelCheckpoint.from_network(net)
    w = np.random.default_rng(0).normal(size=(8, 2))
    p1, ms = predict(ck, w)
    p2, _ = predict(ck, w)
    assert p1 == p2 and ms > 0
    assert classify(0.7) == 1 and classify(0.3) == 0
    with pytest.raises(ConfigError):
        predict(ck, np.zeros((9, 2)))


def test_checkpoint_roundtrip(tmp_path):
    x, y = batch((24, 2), n=8)
    ck, _ = train(convlstm_net().spec, (x, y), TrainConfig(epochs=1, batch_size=4))
    path = tmp_path / "m.ogck"
    ck.save(path)
    back = ModelCheckpoint.load(path)
    assert back.to_bytes() == ck.to_bytes()
    assert np.array_equal(back.network().forward(x), ck.network().forward(x))
    for k in ck.state:
        assert np.array_equal(back.state[k], ck.state[k])


def test_checkpoint_rejects_corruption():
    blob = ModelCheckpoint.from_network(dense_net()).to_bytes()
    with pytest.raises(DataFault, match="bad magic"):
        ModelCheckpoint.from_bytes(b"OGDS1" + blob[5:])
    with pytest.raises(DataFault):
        ModelCheckpoint.from_bytes(blob + b"\x00")
    with pytest.raises(DataFault):
        ModelCheckpoint.from_bytes(blob[:-8])


def test_backward_without_cache_raises():
    layer = L.Dense(3)
    layer.build((4,), np.random.default_rng(0))
    with pytest.raises(NumericalFault):
        layer.backward(np.zeros((1, 3)))


def test_recalibrated_batchnorm_matches_population():
    from evcsguard.nn import recalibrate_batchnorm
    net = dense_net()
    x, _ = batch((8, 3), n=50)
    recalibrate_batchnorm(net, x, batch=7)
    h = x.reshape(50, -1) @ net.layers[1].params["W"] + net.layers[1].params["b"]
    h = np.where(h > 0, h, 0.01 * h)
    bn = net.layers[3]
    assert np.allclose(bn.state["running_mean"], h.mean(axis=0))
    assert np.allclose(bn.state["running_var"], h.var(axis=0))
