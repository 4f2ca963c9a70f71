import hashlib
import math

import numpy as np
import pytest

from ffamc.autodiff import grad_check, softmax_ce
from ffamc.channel import ChannelFrame, ConfigError, ScenarioConfig, gen_sequence
from ffamc.models import (
    CnnLstmConfig,
    SampleSet,
    TrainConfig,
    TrainReport,
    accuracy,
    build_cnn_lstm,
    build_cnn_only,
    load_model,
    normalize_sample,
    predict,
    predict_batch,
    predict_logits,
    train_supervised,
)

SMALL = CnnLstmConfig(growth_channels=2, lstm_hidden=6, fcl_sizes=(12, 8, 15), n_bs=8, n_ue=2)

# default architecture sizes (pure functions of the config)
N_PARAMS_CNN_LSTM = 215_899
N_PARAMS_CNN_ONLY = 73_819

# seed-7 los mobile random-placement sequence, target user 1
GOLDEN_SAMPLE_SHA256 = "f8a15f3bd306481d6e99550faee2ed71c3f1ad8f5620ae93713ef6c18201ef33"
GOLDEN_SAMPLE_SCALE = 0.6718810394626402
GOLDEN_SAMPLE_X0 = 1.6424998020998214


def rand_x(n, cfg=SMALL, seed=0):
    x = np.random.default_rng(seed).normal(size=(n, cfg.seq_len, 2, cfg.n_bs, cfg.n_ue))
    return x / np.sqrt(np.mean(x * x, axis=(1, 2, 3, 4), keepdims=True))


# --- construction --------------------------------------------------------------


def test_default_shape_contract():
    m = build_cnn_lstm()
    assert m.forward(rand_x(2, CnnLstmConfig())).shape == (2, 15)
    assert m.logits(rand_x(1, CnnLstmConfig())[0][None]).shape == (1, 15)


def test_cnn_only_shape_contract():
    m = build_cnn_only()
    x = rand_x(2, CnnLstmConfig())
    assert m.forward(x[:, -1]).shape == (2, 15)
    np.testing.assert_array_equal(m.logits(x), m.logits(x[:, -1]))


def test_parameter_counts_are_stable():
    assert build_cnn_lstm().n_params == N_PARAMS_CNN_LSTM
    assert build_cnn_only().n_params == N_PARAMS_CNN_ONLY
    assert build_cnn_lstm().n_params < 1_000_000


def test_trunks_are_identical():
    a, b = build_cnn_lstm(), build_cnn_only()
    pa = {p.name: p.value for l in a.trunk.layers() for p in l.params()}
    pb = {p.name: p.value for l in b.trunk.layers() for p in l.params()}
    assert pa.keys() == pb.keys()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_architecture_constants_enforced():
    for bad in (dict(dense_blocks=2), dict(convs_per_block=3), dict(lstm_layers=2), dict(fcl_sizes=(64, 15)),
                dict(fcl_sizes=(64, 32, 10)), dict(seq_len=0)):
        with pytest.raises(ConfigError):
            CnnLstmConfig(**bad)


def test_incompatible_input_rejected_at_build():
    with pytest.raises(ConfigError):
        build_cnn_lstm(CnnLstmConfig(kernel=2))


def test_build_is_deterministic():
    a, b = build_cnn_lstm(SMALL), build_cnn_lstm(SMALL)
    x = rand_x(3)
    assert a.logits(x).tobytes() == b.logits(x).tobytes()
    c = build_cnn_lstm(CnnLstmConfig(**{**SMALL.__dict__, "init_seed": 1}))
    assert not np.array_equal(a.logits(x), c.logits(x))


def test_zero_final_layer_gives_ln15():
    m = build_cnn_lstm()
    m.head.dense[-1].weight.value[...] = 0.0
    m.head.dense[-1].bias.value[...] = 0.0
    loss, _ = softmax_ce(m.forward(rand_x(4, CnnLstmConfig())), np.arange(4))
    assert abs(loss - math.log(15)) < 1e-12


def _composite_check(model, x, y, tol, n_coords=64):
    params = model.params()

    def f():
        loss, d = softmax_ce(model.forward(x), y)
        for p in params:
            p.zero_grad()
        model.backward(d)
        return loss

    # gradients below ~1e-6 are dominated by finite-difference rounding
    return grad_check(f, params, tol=tol, n_coords=n_coords, floor=1e-6, pattern=model.activation_pattern)


def test_composite_gradient_cnn_lstm():
    model = build_cnn_lstm()
    rep = _composite_check(model, rand_x(4, CnnLstmConfig(), seed=3), np.array([0, 5, 9, 14]), 1e-4)
    assert rep.passed, rep


def test_composite_gradient_cnn_only():
    model = build_cnn_only()
    rep = _composite_check(model, rand_x(4, CnnLstmConfig(), seed=4), np.array([1, 2, 3, 4]), 1e-4)
    assert rep.passed, rep


def test_input_gradient_reaches_every_frame():
    m = build_cnn_lstm(SMALL)
    x = rand_x(2)
    _, d = softmax_ce(m.forward(x), np.array([0, 1]))
    dx = m.backward(d)
    assert dx.shape == x.shape
    assert all(np.abs(dx[:, t]).sum() > 0 for t in range(SMALL.seq_len))
    m2 = build_cnn_only(SMALL)
    _, d = softmax_ce(m2.forward(x), np.array([0, 1]))
    dx = m2.backward(d)
    assert np.all(dx[:, :-1] == 0) and np.abs(dx[:, -1]).sum() > 0


# --- normalization -------------------------------------------------------------


def _frames(seed=7):
    cfg = ScenarioConfig(propagation="los", mobility="mobile", mode="random_placement", speed_mps=2.8,
                         master_seed=seed)
    return gen_sequence(cfg, 3)


def test_normalize_unit_rms_and_layout():
    frames = _frames()
    x = normalize_sample(frames, 3)
    assert x.shape == (3, 2, 32, 4)
    assert abs(math.sqrt(np.mean(x * x)) - 1) < 1e-9
    ratio = x[1, 0] / frames[1].re
    np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-12)


def test_normalize_rotates_target_user_to_column_zero():
    frames = _frames()
    x0, x2 = normalize_sample(frames, 3, 0), normalize_sample(frames, 3, 2)
    np.testing.assert_array_equal(x2[..., 0], x0[..., 2])
    np.testing.assert_array_equal(x2[..., 1], x0[..., 3])


def test_normalize_scale_invariance():
    frames = _frames()
    scaled = [ChannelFrame.from_complex(f.h * 37.5) for f in frames]
    np.testing.assert_allclose(normalize_sample(scaled, 3), normalize_sample(frames, 3), rtol=1e-13, atol=1e-14)


def test_normalize_rejects_zero_and_short():
    with pytest.raises(ValueError):
        normalize_sample([np.zeros((2, 4, 2))] * 3)
    with pytest.raises(ValueError):
        normalize_sample(_frames()[:2], 3)


def test_normalize_golden():
    x, scale = normalize_sample(_frames(), 3, target_user=1, return_scale=True)
    assert abs(scale - GOLDEN_SAMPLE_SCALE) < 1e-12
    assert abs(x[0, 0, 0, 0] - GOLDEN_SAMPLE_X0) < 1e-12
    assert hashlib.sha256(x.astype("<f8").tobytes()).hexdigest() == GOLDEN_SAMPLE_SHA256


def test_prediction_is_scale_invariant():
    m = build_cnn_lstm()
    frames = _frames(3)
    a = predict(m, normalize_sample(frames, 3, 1))
    b = predict(m, normalize_sample([ChannelFrame.from_complex(f.h * 1e-3) for f in frames], 3, 1))
    assert a == b


# --- prediction and accuracy ---------------------------------------------------


def test_predict_logits_examples():
    z = np.zeros(15)
    z[0] = 1.0
    assert predict_logits(z)[0] == 10
    z = np.zeros(15)
    z[3] = z[7] = 2.0
    assert predict_logits(z)[0] == 13


def test_predict_range():
    m = build_cnn_lstm(SMALL)
    p = predict_batch(m, rand_x(50, seed=5))
    assert p.min() >= 10 and p.max() <= 24


def test_accuracy_examples():
    y = np.repeat(np.arange(15), 4)
    s = SampleSet(np.zeros((60, 1, 2, 1, 1)), y)
    assert accuracy(lambda d: d.y + 10, s) == 1.0
    assert accuracy(lambda d: np.full(len(d), 10), s) == pytest.approx(1 / 15)


def test_accuracy_hand_count():
    m = build_cnn_lstm(SMALL)
    x = rand_x(30, seed=8)
    y = np.random.default_rng(9).integers(0, 15, 30)
    pred = predict_batch(m, x)
    hits = 0
    for i in range(30):
        hits += int(pred[i] == y[i] + 10)
    assert accuracy(m, SampleSet(x, y)) == hits / 30


def test_accuracy_empty_rejected():
    with pytest.raises(ValueError):
        accuracy(build_cnn_lstm(SMALL), SampleSet(np.zeros((0, 3, 2, 8, 2)), np.zeros(0, int)))


# --- training --------------------------------------------------------------------


def test_memorization_and_monotone_loss():
    x = np.repeat(rand_x(1, CnnLstmConfig(), seed=2), 64, axis=0)
    s = SampleSet(x, np.full(64, 6))
    m = build_cnn_lstm()
    rep = train_supervised(m, s, None, TrainConfig(learning_rate=0.01, epochs=20))
    assert rep.train_acc[-1] == 1.0
    assert predict(m, x[0]) == 16
    assert all(b <= a for a, b in zip(rep.loss[3:], rep.loss[4:]))
    assert len(rep.loss) == len(rep.train_acc) == len(rep.test_acc) == 20


def test_zero_learning_rate_leaves_parameters_untouched():
    m = build_cnn_lstm(SMALL)
    before = {p.name: p.value.tobytes() for p in m.params()}
    s = SampleSet(rand_x(20), np.arange(20) % 15)
    train_supervised(m, s, None, TrainConfig(learning_rate=0.0, epochs=2, batch_size=8))
    assert all(p.value.tobytes() == before[p.name] for p in m.params())


def _toy_separable(n, seed):
    """Two classes whose real planes are offset by +-0.5: separable along the all-ones direction."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, SMALL.seq_len, 2, SMALL.n_bs, SMALL.n_ue))
    x[:, :, 0] += np.where(y == 1, 0.5, -0.5)[:, None, None, None]
    return x, y * 7


def test_toy_separable_set_is_learned():
    xtr, ytr = _toy_separable(400, 0)
    xte, yte = _toy_separable(200, 1)
    # oracle: a direct least-squares linear classifier separates the classes
    a = np.c_[xtr.reshape(len(xtr), -1), np.ones(len(xtr))]
    coef, *_ = np.linalg.lstsq(a, np.where(ytr > 0, 1.0, -1.0), rcond=None)
    lin = (np.c_[xte.reshape(len(xte), -1), np.ones(len(xte))] @ coef > 0).astype(int) * 7
    assert np.mean(lin == yte) >= 0.95
    # the three stacked LSTM layers sit on a plateau before the offset is picked up
    m = build_cnn_lstm(CnnLstmConfig(**{**SMALL.__dict__, "lstm_hidden": 16}))
    rep = train_supervised(m, SampleSet(xtr, ytr), SampleSet(xte, yte),
                           TrainConfig(batch_size=32, learning_rate=0.2, epochs=50))
    assert max(rep.test_acc) >= 0.95


def test_training_is_bit_reproducible():
    s = SampleSet(rand_x(40, seed=3), np.arange(40) % 15)
    t = SampleSet(rand_x(10, seed=4), np.arange(10) % 15)
    tc = TrainConfig(batch_size=16, learning_rate=0.05, epochs=3)
    r1 = train_supervised(build_cnn_lstm(SMALL), s, t, tc)
    r2 = train_supervised(build_cnn_lstm(SMALL), s, t, tc)
    assert (r1.loss, r1.train_acc, r1.test_acc) == (r2.loss, r2.train_acc, r2.test_acc)


def test_empty_split_rejected():
    s = SampleSet(rand_x(4), np.zeros(4, int))
    with pytest.raises(ConfigError):
        train_supervised(build_cnn_lstm(SMALL), s.subset([]), None, TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train_supervised(build_cnn_lstm(SMALL), s, s.subset([]), TrainConfig(epochs=1))


def test_train_config_validation():
    for bad in (dict(batch_size=1), dict(epochs=0), dict(learning_rate=-1.0), dict(eval_every=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# --- checkpoints -----------------------------------------------------------------


@pytest.mark.parametrize("build", [build_cnn_lstm, build_cnn_only])
def test_checkpoint_round_trip_predictions(tmp_path, build):
    m = build(SMALL)
    s = SampleSet(rand_x(40, seed=6), np.arange(40) % 15)
    train_supervised(m, s, None, TrainConfig(batch_size=8, learning_rate=0.05, epochs=2))
    path = tmp_path / "m.amcw"
    m.save(path)
    back = load_model(path)
    x = rand_x(100, seed=7)
    np.testing.assert_array_equal(predict_batch(back, x), predict_batch(m, x))
    assert back.logits(x).tobytes() == m.logits(x).tobytes()
    assert back.descriptor() == m.descriptor()


def test_checkpoint_missing_tensor_rejected(tmp_path):
    from ffamc.autodiff import load_tensors, save_tensors

    m = build_cnn_lstm(SMALL)
    path = tmp_path / "m.amcw"
    m.save(path)
    state = load_tensors(path)
    state.pop(next(iter(state)))
    save_tensors(path, state)
    with pytest.raises(ConfigError):
        load_model(path)


def test_train_report_csv_round_trip(tmp_path):
    rep = TrainReport([1.5, 0.25], [0.5, 0.75], [0.4, float("nan")])
    rep.to_csv(tmp_path / "r.csv")
    back = TrainReport.from_csv(tmp_path / "r.csv")
    assert back.loss == rep.loss and back.train_acc == rep.train_acc
    assert back.test_acc[0] == 0.4 and math.isnan(back.test_acc[1])
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "epoch,loss,train_acc,test_acc"
