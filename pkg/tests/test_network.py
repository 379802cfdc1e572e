import math

import numpy as np
import pytest

from vesselkit.convolution import CROSSHAIR, FULL3D
from vesselkit.network import (
    LayerSpec,
    LogEntry,
    NetworkSpec,
    TrainConfig,
    TrainLog,
    backward,
    forward,
    init_parameters,
    load_checkpoint,
    lr_schedule,
    predict,
    save_checkpoint,
    train,
    zero_parameters,
)
from vesselkit.volume import Volume3D


def tiny_spec(mode=FULL3D):
    return NetworkSpec((
        LayerSpec(1, 2, (3, 3, 3), "tanh", mode),
        LayerSpec(2, 1, (1, 1, 1), "sigmoid", FULL3D),
    ))


def blob_dataset(seed, n=2, shape=(12, 12, 12)):
    """Bright noisy blobs: a trivially learnable segmentation."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        y = np.zeros(shape, np.uint8)
        for _ in range(3):
            c = rng.integers(2, 10, 3)
            y[c[0] - 2:c[0] + 2, c[1] - 2:c[1] + 2, c[2] - 2:c[2] + 2] = 1
        x = y * 1.0 + rng.normal(0, 0.3, shape)
        out.append((x.astype(np.float32), y))
    return out


def test_default_parameter_count():
    spec = NetworkSpec.default()
    assert spec.parameter_count() == (45935, 86)
    assert spec.receptive_radius == 6


def test_full3d_default_weight_count():
    w, b = NetworkSpec.default(FULL3D).parameter_count()
    assert w == 27 * 5 + 125 * 50 + 125 * 200 + 27 * 1000 + 50
    assert b == 86


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec((LayerSpec(1, 2, (3, 3, 3), "tanh", CROSSHAIR),))
    with pytest.raises(ValueError):
        NetworkSpec((LayerSpec(1, 2, (3, 3, 3), "tanh", CROSSHAIR), LayerSpec(3, 1, (1, 1, 1), "sigmoid", FULL3D)))


def test_spec_dict_roundtrip():
    spec = NetworkSpec.default(in_channels=2)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_within_bounds_and_seeded():
    spec = NetworkSpec.default()
    a = init_parameters(spec, seed=3)
    b = init_parameters(spec, seed=3)
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert not np.array_equal(a.to_vector(), init_parameters(spec, seed=4).to_vector())
    for layer, k in zip(spec.layers, a.kernels):
        bound = layer.init_bound
        for arr in (k.planes if hasattr(k, "planes") else (k.weights,)):
            assert np.abs(arr).max() < bound
    assert all(np.all(b == 0) for b in a.biases)


def test_zero_parameters_give_half():
    spec = NetworkSpec.compact()
    p = forward(spec, zero_parameters(spec), np.random.default_rng(0).normal(size=(6, 6, 6)))
    assert np.all(p == 0.5)


def test_shape_preserved_on_odd_volume():
    spec = NetworkSpec.default()
    x = np.random.default_rng(0).normal(size=(33, 20, 7))
    p = forward(spec, init_parameters(spec, 0), x)
    assert p.shape == x.shape and np.all((p > 0) & (p < 1))


def test_two_layer_scalar_oracle():
    spec = tiny_spec()
    params = init_parameters(spec, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    params = params.with_arrays([rng.normal(size=a.shape) for a in params.arrays()])
    x = rng.normal(size=(4, 4, 4))
    w1, b1 = params.kernels[0].weights, params.biases[0]
    w2, b2 = params.kernels[1].weights, params.biases[1]
    expected = np.zeros(x.shape)
    for i, j, k in np.ndindex(x.shape):
        hidden = []
        for o in range(2):
            acc = b1[o]
            for r, s, t in np.ndindex(3, 3, 3):
                a, b, c = i + r - 1, j + s - 1, k + t - 1
                if 0 <= a < 4 and 0 <= b < 4 and 0 <= c < 4:
                    acc += x[a, b, c] * w1[o, 0, r, s, t]
            hidden.append(math.tanh(acc))
        z = b2[0] + sum(h * w2[0, o, 0, 0, 0] for o, h in enumerate(hidden))
        expected[i, j, k] = 1 / (1 + math.exp(-z))
    np.testing.assert_allclose(forward(spec, params, x), expected, rtol=1e-12)


def test_channel_mismatch():
    spec = NetworkSpec.compact(in_channels=2)
    with pytest.raises(ValueError):
        forward(spec, zero_parameters(spec), np.zeros((4, 4, 4)))
    assert forward(spec, zero_parameters(spec), np.zeros((2, 4, 4, 4))).shape == (4, 4, 4)


def test_predict_equals_forward():
    spec = NetworkSpec.compact(in_channels=2)
    params = init_parameters(spec, 0)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 9, 8, 7))
    out = predict(spec, params, Volume3D(a), [b])
    assert isinstance(out, Volume3D)
    np.testing.assert_array_equal(out.data, forward(spec, params, np.stack([a, b]).astype(np.float32)))


def test_translation_equivariance_interior():
    spec = NetworkSpec.compact()
    params = init_parameters(spec, 5)
    x = np.random.default_rng(3).normal(size=(14, 14, 14)).astype(np.float32)
    shifted = np.zeros_like(x)
    shifted[2:] = x[:-2]
    r = spec.receptive_radius
    a = forward(spec, params, x)
    b = forward(spec, params, shifted)
    np.testing.assert_allclose(b[2 + r:-r], a[r:-2 - r], rtol=1e-5, atol=1e-6)


def test_backward_returns_matching_shapes():
    spec = tiny_spec(CROSSHAIR)
    params = init_parameters(spec, 0)
    x, y = blob_dataset(0, 1)[0]
    grads, value, probs = backward(spec, params, x, y)
    assert [g.shape for g in grads.arrays()] == [p.shape for p in params.arrays()]
    assert probs.shape == y.shape and value.total == value.l1 + value.l2
    _, v1, _ = backward(spec, params, x, y, loss="l1")
    assert v1.total == v1.l1
    with pytest.raises(ValueError):
        backward(spec, params, x, y, loss="l3")


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(199, cfg) == 0.01
    assert lr_schedule(200, cfg) == pytest.approx(0.0099, rel=1e-14)
    assert lr_schedule(1000, cfg) == pytest.approx(0.01 * 0.99 ** 5, rel=1e-14)
    assert round(lr_schedule(1000, cfg), 7) == 0.0095099


def test_train_config_validation():
    for kw in ({"base_lr": -1}, {"decay": 0}, {"log_every": 0}, {"iterations": -1}, {"loss": "l2"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_zero_iterations_is_noop():
    spec = tiny_spec()
    p0 = init_parameters(spec, 0)
    p1, log = train(spec, p0, blob_dataset(0), TrainConfig(iterations=0, patch_size=12))
    assert np.array_equal(p0.to_vector(), p1.to_vector()) and len(log) == 0


def test_zero_lr_keeps_parameters_and_logs():
    spec = tiny_spec()
    p0 = init_parameters(spec, 0)
    p1, log = train(spec, p0, blob_dataset(0), TrainConfig(iterations=3, base_lr=0.0, patch_size=12))
    assert np.array_equal(p0.to_vector(), p1.to_vector())
    assert log.column("iteration") == [3]


def test_training_is_deterministic():
    spec = tiny_spec(CROSSHAIR)
    cfg = TrainConfig(iterations=6, patch_size=6, log_every=2, seed=1)
    a, la = train(spec, init_parameters(spec, 0), blob_dataset(1), cfg)
    b, lb = train(spec, init_parameters(spec, 0), blob_dataset(1), cfg)
    assert np.array_equal(a.to_vector(), b.to_vector()) and la.to_csv() == lb.to_csv()
    assert la.column("iteration") == [2, 4, 6]


def test_short_training_reduces_loss():
    spec = NetworkSpec.compact()
    drops = []
    for seed in range(5):
        data = blob_dataset(seed)
        cfg = TrainConfig(iterations=200, patch_size=12, log_every=1, seed=seed, base_lr=0.05)
        _, log = train(spec, init_parameters(spec, seed), data, cfg)
        tot = log.column("total")
        drops.append(np.mean(tot[-20:]) < np.mean(tot[:20]))
    assert sum(drops) >= 4


def test_log_csv_roundtrip_and_monotone():
    log = TrainLog()
    log.append(LogEntry(5, 1.0, 0.5, 1.5, 0.0, 0.7, None, 0.0, None, 0.01))
    log.append(LogEntry(10, 0.9, 0.1, 1.0, 0.6, 0.0, 0.5, 0.25, 2.0, 0.01))
    assert TrainLog.from_csv(log.to_csv()) == log
    with pytest.raises(ValueError):
        log.append(LogEntry(10, 0, 0, 0, 0, 0, None, None, None, 0))


def test_checkpoint_roundtrip(tmp_path):
    spec = NetworkSpec.default(in_channels=2)
    params = init_parameters(spec, 7)
    save_checkpoint(tmp_path / "m", spec, params, iteration=12, meta={"task": "bifurcation"})
    spec2, params2, header = load_checkpoint(tmp_path / "m.json")
    assert spec2 == spec and header["iteration"] == 12 and header["meta"]["task"] == "bifurcation"
    assert np.array_equal(params2.to_vector(), params.to_vector())
    raw = (tmp_path / "m.raw").read_bytes()
    assert len(raw) == 4 * sum(spec.parameter_count())


def test_checkpoint_truncated(tmp_path):
    spec = NetworkSpec.compact()
    save_checkpoint(tmp_path / "m", spec, init_parameters(spec, 0))
    (tmp_path / "m.raw").write_bytes((tmp_path / "m.raw").read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m")
