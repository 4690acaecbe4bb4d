import numpy as np
import pytest

from residual_lens.core import TrainingError, ValidationError
from residual_lens.synth import oracle_finite_diff
from residual_lens.training import Adam, OptimConfig, cosine_ce, train


def test_cosine_ce_gradient(rng):
    enc = rng.standard_normal((5, 4))
    classes = rng.standard_normal((3, 4))
    classes /= np.linalg.norm(classes, axis=1, keepdims=True)
    labels = np.array([0, 2, 1, 1, 0])
    _, g = cosine_ce(enc, classes, labels, 7.0)
    fd = oracle_finite_diff(lambda e: cosine_ce(e, classes, labels, 7.0, need_grad=False)[0], enc, h=1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_cosine_ce_frozen_value():
    classes = np.eye(2)
    loss, _ = cosine_ce(np.array([[1.0, 0.0]]), classes, np.array([0]), 1.0)
    assert loss == pytest.approx(np.log(1 + np.exp(-1.0)), rel=1e-12)


def test_cosine_ce_zero_row():
    with pytest.raises(ValidationError):
        cosine_ce(np.zeros((1, 2)), np.eye(2), np.array([0]), 1.0)


def test_adam_first_step_is_lr_times_sign():
    opt = Adam(3, lr=0.1)
    out = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    np.testing.assert_allclose(out, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_config_json():
    cfg = OptimConfig.from_json({"lr": 0.01, "patience": 2})
    assert cfg.lr == 0.01 and cfg.patience == 2 and cfg.batch == 256
    assert OptimConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValidationError):
        OptimConfig.from_json({"learning_rate": 1.0})
    with pytest.raises(ValidationError):
        OptimConfig(lr=0.0)


def _quadratic(target):
    def loss_grad(p, idx):
        return float(np.sum((p - target) ** 2)), 2 * (p - target)
    return loss_grad


def test_early_stopping_keeps_epoch_zero_without_improvement():
    res = train(np.zeros(2), _quadratic(np.ones(2)), lambda p: 0.5, 10, OptimConfig(lr=0.1, patience=3))
    assert res.best_epoch == 0
    np.testing.assert_array_equal(res.params, np.zeros(2))
    assert len(res.history) == 4


def test_best_epoch_is_kept():
    accs = iter([0.1, 0.3, 0.9, 0.2, 0.2])
    res = train(np.zeros(1), _quadratic(np.ones(1)), lambda p: next(accs), 4, OptimConfig(lr=0.1, patience=2, batch=4))
    assert res.best_epoch == 2 and res.best_val_acc == 0.9
    assert [h.epoch for h in res.history] == [0, 1, 2, 3, 4]


def test_divergence_reported():
    def bad(p, idx):
        return float("nan"), p
    with pytest.raises(TrainingError, match="epoch 1"):
        train(np.zeros(1), bad, lambda p: 0.0, 2, OptimConfig())


def test_batch_order_depends_on_seed():
    seen = {}
    for seed in (0, 1):
        order = []

        def loss_grad(p, idx, order=order):
            order.extend(idx.tolist())
            return 0.0, np.zeros_like(p)
        train(np.zeros(1), loss_grad, lambda p: 0.0, 6, OptimConfig(batch=2, max_epochs=1, seed=seed))
        seen[seed] = order[6:]
    assert sorted(seen[0]) == list(range(6))
    assert seen[0] != seen[1]
