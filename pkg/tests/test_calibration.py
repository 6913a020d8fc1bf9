import logging

import numpy as np
import pytest

from changeinfer.calibration import (CalibConfig, incremental_losses, select_thresholds, sweep_threshold_factor)
from changeinfer.errors import CalibrationError, ConfigError
from changeinfer.metrics import MSE, PIXEL_ACCURACY, loss, mse, pixel_accuracy
from changeinfer.network import (CONV, MAXPOOL, DenseNetwork, LayerSpec, NetworkSpec, convert_to_cb,
                                 random_weights)
from changeinfer.synthetic import SyntheticConfig, gen_synthetic


def small_net(seed=0):
    spec = NetworkSpec((3, 24, 24), (
        LayerSpec("c1", CONV, 4, 3, padding=1, relu=True),
        LayerSpec("p1", MAXPOOL, kernel=2, stride=2),
        LayerSpec("c2", CONV, 6, 3, padding=1, relu=True),
        LayerSpec("c3", CONV, 3, 1),
    ))
    return DenseNetwork(spec, random_weights(spec, seed))


def noisy_frames(seed=0, n=5, noise=0.05):
    return gen_synthetic(SyntheticConfig(24, 24, 3, n, 1, (4, 4), (1, 1), noise, seed))


def test_metric_examples():
    a = np.random.default_rng(0).random((3, 4, 4))
    assert pixel_accuracy(a, a.argmax(0)) == 1.0 and mse(a, a) == 0.0
    pred = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert pixel_accuracy(pred, np.array([[0, 0]])) == 0.5
    assert mse([0, 0], [1, 1]) == 1.0
    assert loss(pred, pred, PIXEL_ACCURACY) == 0.0


def test_config_validation():
    seqs = [noisy_frames()]
    for bad in (dict(initial_tau=0), dict(growth_factor=1.0), dict(per_layer_budget=-1), dict(metric="psnr"),
                dict(aggregate="median"), dict(eval_frames="first")):
        with pytest.raises(ConfigError):
            CalibConfig(seqs, **bad)
    with pytest.raises(ConfigError):
        CalibConfig([])


def test_zero_budget_gives_zero_vector_on_noisy_data():
    cb = convert_to_cb(small_net())
    res = select_thresholds(cb, CalibConfig([noisy_frames()], per_layer_budget=0.0, max_iter=20))
    assert res.thresholds == [0.0, 0.0, 0.0]
    assert cb.thresholds == [0.0, 0.0, 0.0]


def test_static_data_hits_cap_and_reports(caplog):
    x = noisy_frames(n=1)[0]
    cb = convert_to_cb(small_net())
    cfg = CalibConfig([[x] * 4], per_layer_budget=0.0, growth_factor=2.0, max_iter=5)
    with caplog.at_level(logging.WARNING):
        res = select_thresholds(cb, cfg)
    assert res.capped == ["c1", "c2", "c3"]
    assert all(t == pytest.approx(0.01 * 2 ** 4) for t in res.thresholds)
    assert len(caplog.records) == 3
    cfg.strict = True
    with pytest.raises(CalibrationError):
        select_thresholds(convert_to_cb(small_net()), cfg)


def test_trace_strictly_increasing_per_layer_and_budget_respected():
    net = small_net(1)
    cb = convert_to_cb(net)
    seqs = [noisy_frames(2, noise=0.02), noisy_frames(3, noise=0.02)]
    cfg = CalibConfig(seqs, per_layer_budget=1e-4, growth_factor=1.5, max_iter=25)
    res = select_thresholds(cb, cfg)
    for name in res.layer_names:
        taus = [r.tau for r in res.trace if r.layer == name]
        assert all(b > a for a, b in zip(taus, taus[1:]))
    inc = incremental_losses(cb, cfg, res.thresholds)
    for name, v in inc.items():
        assert v <= cfg.budget(name)
    # the kept threshold is the last one within budget
    for name, tau in zip(res.layer_names, res.thresholds):
        rows = [r for r in res.trace if r.layer == name]
        assert all(r.incremental_loss <= 1e-4 for r in rows if r.tau <= tau)
        if name not in res.capped:
            assert rows[-1].incremental_loss > 1e-4


def test_rerun_is_identical():
    seqs = [noisy_frames(4)]
    cfg = CalibConfig(seqs, per_layer_budget=1e-4, growth_factor=1.5, max_iter=20)
    a = select_thresholds(convert_to_cb(small_net()), cfg)
    b = select_thresholds(convert_to_cb(small_net()), cfg)
    assert a.thresholds == b.thresholds


def test_per_layer_budget_override():
    seqs = [noisy_frames(5)]
    cfg = CalibConfig(seqs, per_layer_budget=0.0, layer_budgets={"c3": 1.0}, growth_factor=2.0, max_iter=8)
    cb = convert_to_cb(small_net())
    res = select_thresholds(cb, cfg)
    assert res.thresholds[2] > max(res.thresholds[:2])
    inc = incremental_losses(cb, cfg, res.thresholds)
    assert inc["c1"] == inc["c2"] == 0.0


def test_pixel_accuracy_metric_and_worst_aggregate():
    seqs = [noisy_frames(6), noisy_frames(7)]
    cfg = CalibConfig(seqs, per_layer_budget=0.01, metric=PIXEL_ACCURACY, aggregate="worst",
                      eval_frames="all", growth_factor=1.5, max_iter=15)
    cb = convert_to_cb(small_net())
    res = select_thresholds(cb, cfg)
    assert all(t >= 0 for t in res.thresholds)
    inc = incremental_losses(cb, cfg, res.thresholds)
    assert all(v <= 0.01 for v in inc.values())


def test_sweep_examples():
    net = small_net(2)
    cb = convert_to_cb(net)
    seqs = [noisy_frames(8, n=6, noise=0.03)]
    curve = sweep_threshold_factor(cb, [0.05, 0.1, 0.1], [0, 0.5, 1, 2], seqs)
    ops = curve.column("total_eff_ops")
    losses = curve.column("loss")
    assert losses[0] == 0.0
    assert ops[0] == max(ops)
    assert all(b <= a for a, b in zip(ops, ops[1:]))
    assert losses[3] >= losses[2]
    assert cb.thresholds == [0.05, 0.1, 0.1]


def test_sweep_rejects_bad_factors():
    cb = convert_to_cb(small_net())
    with pytest.raises(ConfigError):
        sweep_threshold_factor(cb, [0.1] * 3, [0, 1, 1], [noisy_frames()])
    with pytest.raises(ConfigError):
        sweep_threshold_factor(cb, [0.1] * 3, [-1, 1], [noisy_frames()])


def test_reference_count_mismatch():
    with pytest.raises(ConfigError):
        select_thresholds(convert_to_cb(small_net()),
                          CalibConfig([noisy_frames()], references=[], per_layer_budget=0.0, metric=MSE))
