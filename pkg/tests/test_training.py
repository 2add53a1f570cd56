import dataclasses
import json
from decimal import Decimal, getcontext
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazehoi import training
from gazehoi.autodiff import Tensor, parameter
from gazehoi.data import load_annotations
from gazehoi.errors import ConfigError, NonFiniteError, NoPositiveLabel
from gazehoi.features import SyntheticFeatures
from gazehoi.gradcheck import check_gradients
from gazehoi.model import ModelConfig, load_checkpoint, read_checkpoint
from gazehoi.training import (
    LossConfig, OptimConfig, OptimizerState, TrainConfig, adamw_step, bce_loss, cb_focal_loss,
    class_weights, lr_schedule, mlm_loss, train,
)


def fixture_videos():
    return load_annotations(resources.files("gazehoi") / "fixtures" / "two_person_park.json")


# ---------------------------------------------------------------- losses


@pytest.mark.parametrize("beta", [0.0, 0.5, 0.9, 0.9999])
def test_unit_count_weight_is_one(beta):
    assert class_weights([1], beta)[0] == 1.0


def test_unseen_class_weight():
    assert class_weights([0, 3], 0.9)[0] == pytest.approx(0.1)


def test_gamma_zero_reduces_to_bce():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(4, 7))
    y = rng.integers(0, 2, size=(4, 7))
    bce = bce_loss(p, y, reduction="none").data
    unit = cb_focal_loss(p, y, np.ones(7), gamma=0.0, reduction="none").data
    np.testing.assert_array_equal(unit, bce)
    w = class_weights([12], 0.99)[0]
    uniform = cb_focal_loss(p, y, np.full(7, 12), beta=0.99, gamma=0.0, reduction="none").data
    np.testing.assert_array_equal(uniform, bce * w)


def test_scalar_oracle():
    getcontext().prec = 50
    beta = Decimal("0.9999")
    w = (1 - beta) / (1 - beta ** 10)
    oracle = w * Decimal("0.5").sqrt() * Decimal(2).ln()
    got = cb_focal_loss(np.array([0.5]), np.array([1]), np.array([10]), 0.9999, 0.5).item()
    assert abs(Decimal(got) - oracle) / oracle < Decimal("1e-12")


def test_zero_count_gives_finite_loss():
    val = cb_focal_loss(np.array([0.3, 0.9]), np.array([1, 0]), np.array([0, 0])).item()
    assert np.isfinite(val) and val > 0


def test_clamp_keeps_extremes_finite():
    val = cb_focal_loss(np.array([0.0, 1.0]), np.array([1, 0]), np.array([5, 5])).item()
    assert np.isfinite(val)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.001, 0.998), st.floats(0.0005, 0.001), st.integers(0, 1),
       st.floats(0, 3), st.integers(0, 100))
def test_loss_nonnegative_and_monotone(p, dp, y, gamma, n):
    def at(q):
        pv = q if y else 1 - q
        return cb_focal_loss(np.array([pv]), np.array([y]), np.array([n]), 0.999, gamma).item()
    assert at(p) >= 0
    assert at(p + dp) <= at(p)


def test_cb_focal_gradient():
    rng = np.random.default_rng(1)
    p = parameter(rng.uniform(0.05, 0.95, size=(3, 5)))
    y = rng.integers(0, 2, size=(3, 5))
    assert check_gradients(lambda: cb_focal_loss(p, y, np.arange(5) * 3), [p]) < 1e-4


def test_mlm_examples():
    assert mlm_loss(np.array([3.0, 0.0, 1.9]), np.array([1, 0, 0])).item() == 0.0
    assert mlm_loss(np.array([1.0, 1.0]), np.array([1, 0])).item() == 1.0
    s = np.array([0.3, -0.2, 0.5])
    y = np.array([1, 0, 1])
    oracle = np.mean([max(0, 1 - s[i] + s[j]) for i in (0, 2) for j in (1,)])
    assert mlm_loss(s, y).item() == pytest.approx(oracle)
    with pytest.raises(NoPositiveLabel):
        mlm_loss(s, np.zeros(3))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(kind="hinge")
    with pytest.raises(ConfigError):
        LossConfig(beta=1.0)
    with pytest.raises(ConfigError):
        LossConfig(gamma=-1)
    with pytest.raises(ConfigError):
        TrainConfig(sampling="frame")


# ---------------------------------------------------------------- optimiser


def test_adamw_zero_gradient():
    p = [np.array([1.0, -2.0])]
    adamw_step(p, [np.zeros(2)], 0.1, OptimizerState.for_params(p, weight_decay=0.0))
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    adamw_step(p, [np.zeros(2)], 0.1, OptimizerState.for_params(p, weight_decay=0.5))
    np.testing.assert_allclose(p[0], np.array([1.0, -2.0]) * 0.95, rtol=0, atol=1e-15)


def test_adamw_scalar_trajectory():
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.5, 0.0, 0.0
    grads = [0.3, -1.2, 0.7]
    expect = []
    for t, g in enumerate(grads, start=1):
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        expect.append(x)
    p = [np.array([1.5])]
    state = OptimizerState.for_params(p, weight_decay=wd)
    for g, e in zip(grads, expect):
        adamw_step(p, [np.array([g])], lr, state)
        assert abs(p[0][0] - e) < 1e-10


def test_adamw_errors():
    p = [np.zeros(2)]
    state = OptimizerState.for_params(p)
    with pytest.raises(NonFiniteError):
        adamw_step(p, [np.array([np.nan, 0.0])], 0.1, state)
    with pytest.raises(ValueError):
        adamw_step(p, [np.zeros(2)], 0.0, state)


# ---------------------------------------------------------------- schedule


def test_lr_schedule_anchors():
    spe = 10
    assert lr_schedule(0, spe, 0) == 1e-8
    assert lr_schedule(3, spe, 0) == 1e-4
    assert lr_schedule(24, spe, 0) == pytest.approx(1e-5, rel=1e-12)
    last_warm = lr_schedule(2, spe, spe - 1)
    assert abs(last_warm - 1e-4) / 1e-4 < 3 / spe


def test_lr_schedule_monotone():
    warm = [lr_schedule(e, 7, s) for e in range(3) for s in range(7)]
    assert all(a < b for a, b in zip(warm, warm[1:]))
    decay = [lr_schedule(e, 7, s) for e in range(3, 25) for s in range(7)]
    assert all(a >= b for a, b in zip(decay, decay[1:]))
    with pytest.raises(ValueError):
        lr_schedule(-1, 7, 0)


# ---------------------------------------------------------------- loop


def fixture_run(tmp_path=None, epochs=3, dropout=0.1, **kw):
    mc = dataclasses.replace(ModelConfig.desk(), dropout=dropout)
    tc = TrainConfig(epochs=epochs, batch_size=4, tau_a=1, sampling="window",
                     optim=OptimConfig(lr_peak=1e-3, warmup_epochs=1), **kw)
    src = SyntheticFeatures.for_config(mc)
    return train(mc, tc, fixture_videos(), src, seed=3,
                 log_path=None if tmp_path is None else tmp_path / "log.jsonl",
                 ckpt_dir=None if tmp_path is None else tmp_path / "ckpt")


def test_training_is_deterministic(tmp_path):
    a = fixture_run(tmp_path / "a")
    b = fixture_run(tmp_path / "b")
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_log_and_checkpoints(tmp_path):
    res = fixture_run(tmp_path, epochs=2)
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert {"epoch", "mean_loss", "lr", "steps"} <= set(lines[0])
    meta, _ = read_checkpoint(tmp_path / "ckpt" / "epoch_002.ckpt")
    assert meta["extra"]["epoch"] == 2
    model = load_checkpoint(tmp_path / "ckpt" / "epoch_002.ckpt")
    for (_, x), (_, y) in zip(model.named_parameters(), res.model.named_parameters()):
        np.testing.assert_allclose(x.data, y.data, rtol=1e-6, atol=1e-7)


def test_excludes_pairs_absent_at_label_frame():
    res = fixture_run(epochs=1)
    ws = [w for v in res.windows.values() for w in v]
    assert ws and all(w.label_present for w in ws)
    assert len(ws) == 22  # 24 windows at gap 1, minus the two bench pairs at t=3


def test_overfit_fixture_loss_drops():
    # memorising 22 windows; dropout only slows this down at desk width
    res = fixture_run(epochs=25, dropout=0.0)
    assert res.log[-1]["mean_loss"] < 0.1 * res.log[0]["mean_loss"]


def test_nonfinite_loss_reports_step(monkeypatch):
    real = training.compute_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        out = real(*args, **kw)
        return Tensor(np.nan) if calls["n"] == 3 else out

    monkeypatch.setattr(training, "compute_loss", flaky)
    with pytest.raises(NonFiniteError) as info:
        fixture_run(epochs=1)
    assert info.value.step == 2
