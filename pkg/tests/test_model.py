import struct

import numpy as np
import pytest

from s2cast.errors import ConfigError, FormatError, ShapeError
from s2cast.model import (
    VARIANTS,
    Forecaster,
    ModelConfig,
    build,
    expected_param_count,
    forward,
    load,
    save,
)
from s2cast.train import TrainConfig, adam_step, mse_loss, OptimizerState

from oracles import lstm_unroll_scalar, max_rel_error, numeric_grad


def toy_config(variant="attention_bilstm", **kw):
    base = dict(variant=variant, time_steps=5, input_features=3, hidden_sizes=[4, 4], output_dim=2, seed=11)
    base.update(kw)
    return ModelConfig(**base)


def randomize_bn(params, rng):
    for k in params.buffers:
        if k.endswith("running_mean"):
            params.buffers[k][...] = rng.normal(scale=0.3, size=params.buffers[k].shape)
        else:
            params.buffers[k][...] = rng.uniform(0.5, 1.5, size=params.buffers[k].shape)


def test_same_seed_gives_identical_parameters():
    assert build(toy_config()).equals(build(toy_config()))
    assert not build(toy_config()).equals(build(toy_config(seed=12)))


def test_parameter_count_closed_form():
    cfg = ModelConfig(variant="attention_bilstm", input_features=6, hidden_sizes=[64, 64], output_dim=1)
    params = build(cfg)
    enumerated = sum(v.size for v in params.blocks.values())
    # BiLSTM 2*4*64*(6+64+1), BN 2*128, LSTM 4*64*(128+64+1), BN 2*64, attention 64+1, dense 64+1
    assert enumerated == expected_param_count(cfg) == 86274
    for variant in VARIANTS:
        cfg = toy_config(variant)
        assert build(cfg).count() == expected_param_count(cfg)


def test_initialization_conventions():
    params = build(toy_config())
    H = 4
    b = params.blocks["rnn0.fwd.b"]
    np.testing.assert_array_equal(b[H:2 * H], 1.0)
    np.testing.assert_array_equal(np.delete(b, range(H, 2 * H)), 0.0)
    U = params.blocks["rnn1.U"]
    np.testing.assert_allclose(U.T @ U, np.eye(H), atol=1e-12)
    limit = np.sqrt(6.0 / (3 + 4 * H))
    assert np.abs(params.blocks["rnn0.fwd.W"]).max() <= limit


@pytest.mark.parametrize("bad", [dict(hidden_sizes=[]), dict(time_steps=0), dict(output_dim=0),
                                 dict(variant="convlstm"), dict(hidden_sizes=[4, 0])])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        build(toy_config(**bad))


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_parameters_predict_zero(variant):
    m = Forecaster(toy_config(variant))
    for v in m.params.blocks.values():
        v.fill(0.0)
    x = np.random.default_rng(0).normal(size=(3, 5, 3))
    np.testing.assert_array_equal(m.predict(x), 0.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_batch_permutation_equivariance(variant):
    m = Forecaster(toy_config(variant))
    rng = np.random.default_rng(1)
    randomize_bn(m.params, rng)
    x = rng.normal(size=(6, 5, 3))
    perm = rng.permutation(6)
    np.testing.assert_array_equal(m.predict(x)[perm], m.predict(x[perm]))


def test_infer_forward_is_pure():
    m = Forecaster(toy_config())
    x = np.random.default_rng(2).normal(size=(4, 5, 3))
    first = m.predict(x)
    assert m.predict(x).tobytes() == first.tobytes()


def test_time_step_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        Forecaster(toy_config()).forward(np.zeros((2, 4, 3)))


def test_attention_rows_sum_to_one():
    m = Forecaster(toy_config())
    _, alpha, _ = m.forward(np.random.default_rng(3).normal(size=(10, 5, 3)))
    assert alpha.shape == (10, 5)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert Forecaster(toy_config("bilstm")).forward(np.zeros((2, 5, 3)))[1] is None


def _bn_infer(x, params, i, eps):
    mean, var = params.buffers[f"bn{i}.running_mean"], params.buffers[f"bn{i}.running_var"]
    return (x - mean) / np.sqrt(var + eps) * params.blocks[f"bn{i}.gamma"] + params.blocks[f"bn{i}.beta"]


def _scalar_lstm(params, prefix, seq):
    return lstm_unroll_scalar(seq.tolist(), params.blocks[prefix + ".W"].tolist(),
                              params.blocks[prefix + ".U"].tolist(), params.blocks[prefix + ".b"].tolist())


def test_forward_matches_layer_by_layer_composition():
    cfg = toy_config(output_dim=1)
    m = Forecaster(cfg)
    rng = np.random.default_rng(4)
    randomize_bn(m.params, rng)
    m.params.blocks["att.b"][0] = 0.3
    p = m.params
    x = rng.normal(size=(1, 5, 3))
    seq = x[0]
    fwd = _scalar_lstm(p, "rnn0.fwd", seq)
    bwd = _scalar_lstm(p, "rnn0.bwd", seq[::-1])[::-1]
    h = np.maximum(_bn_infer(np.concatenate([fwd, bwd], axis=1), p, 0, cfg.bn_epsilon), 0.0)
    h = np.maximum(_bn_infer(_scalar_lstm(p, "rnn1", h), p, 1, cfg.bn_epsilon), 0.0)
    scores = np.array([h[t] @ p.blocks["att.w"] for t in range(5)]) + p.blocks["att.b"][0]
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    pooled = sum(alpha[t] * h[t] for t in range(5)) / 5
    expected = p.blocks["out.W"] @ pooled + p.blocks["out.b"]
    y, got_alpha, _ = m.forward(x)
    np.testing.assert_allclose(y[0], expected, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(got_alpha[0], alpha, rtol=1e-12)


def end_to_end_gradcheck(variant, seed=0):
    """Max relative error of dL/dparam and dL/dx for a train-mode MSE loss."""
    cfg = toy_config(variant, seed=seed)
    m = Forecaster(cfg)
    rng = np.random.default_rng(seed + 50)
    x = rng.normal(size=(2, 5, 3))
    y = rng.normal(size=(2, 2))
    snapshot = {k: v.copy() for k, v in m.params.buffers.items()}

    def loss():
        out = forward(m.params, cfg, x, "train")[0]
        for k, v in snapshot.items():
            m.params.buffers[k][...] = v
        return mse_loss(out, y)[0]

    m.params.zero_grad()
    y_hat, _, caches = m.forward(x, "train")
    for k, v in snapshot.items():
        m.params.buffers[k][...] = v
    dx = m.backward(caches, mse_loss(y_hat, y)[1])
    worst = max_rel_error(dx, numeric_grad(loss, x))
    for name, arr in m.params.blocks.items():
        worst = max(worst, max_rel_error(m.params.grads[name], numeric_grad(loss, arr)))
    return worst


@pytest.mark.parametrize("variant", VARIANTS)
def test_end_to_end_gradient(variant):
    assert end_to_end_gradcheck(variant) < 1e-4


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip(tmp_path):
    cfg = toy_config()
    params = build(cfg)
    randomize_bn(params, np.random.default_rng(5))
    save(params, cfg, tmp_path / "m.s2o1", {"task": "ndvi"})
    loaded, cfg2 = load(tmp_path / "m.s2o1")
    assert cfg2 == cfg
    assert loaded.equals(params)


def test_file_layout_header(tmp_path):
    cfg = toy_config()
    save(build(cfg), cfg, tmp_path / "m.s2o1")
    raw = (tmp_path / "m.s2o1").read_bytes()
    assert raw[:4] == b"S2O1"
    version, meta_len = struct.unpack("<II", raw[4:12])
    assert version == 1
    assert b'"variant": "attention_bilstm"' in raw[12:12 + meta_len]


def test_wrong_magic_and_corruption(tmp_path):
    cfg = toy_config()
    path = tmp_path / "m.s2o1"
    save(build(cfg), cfg, path)
    raw = path.read_bytes()
    (tmp_path / "bad.s2o1").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load(tmp_path / "bad.s2o1")
    (tmp_path / "trunc.s2o1").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load(tmp_path / "trunc.s2o1")
    (tmp_path / "ver.s2o1").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(FormatError):
        load(tmp_path / "ver.s2o1")


def test_one_step_saved_model_predicts_identically(tmp_path):
    cfg = toy_config()
    m = Forecaster(cfg)
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 2))
    m.params.zero_grad()
    y_hat, _, caches = m.forward(x, "train")
    m.backward(caches, mse_loss(y_hat, y)[1])
    adam_step(m.params.blocks, m.params.grads, OptimizerState(m.params.blocks), TrainConfig())
    save(m.params, cfg, tmp_path / "m.s2o1")
    params, cfg2 = load(tmp_path / "m.s2o1")
    restored = Forecaster(cfg2, params)
    assert restored.predict(x).tobytes() == m.predict(x).tobytes()
