import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from takunet import ArchConfig, TakuNet
from takunet.config import TrainConfig
from takunet.data import ImageCache, batch_iterator, index_dataset, make_synthetic_dataset
from takunet.metrics import evaluate
from takunet.trainer import (
    Optimizer,
    OptimizerState,
    fit,
    kfold_split,
    lr_at_epoch,
    rmsprop_step,
    train_epoch,
)

MINI = ArchConfig(input_size=(64, 64), stem_channels=4, stage_depths=(1, 1, 1, 1), stage_out_channels=(4, 8, 8, 8))


@pytest.fixture(scope="module")
def synth64(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth64")
    make_synthetic_dataset(str(root), [13, 13, 13, 13, 12], size=(64, 64), seed=0)
    return str(root)


# -- schedule ----------------------------------------------------------------------

@pytest.mark.parametrize("t,expected", [(0, 1e-3), (1, 1e-3), (2, 9.75e-4), (3, 9.75e-4), (5, 9.50625e-4)])
def test_lr_spot_values(t, expected):
    assert abs(lr_at_epoch(TrainConfig(), t) - expected) <= 1e-12 * expected


def test_lr_piecewise_constant():
    cfg = TrainConfig()
    for t in range(0, 300, 2):
        assert lr_at_epoch(cfg, t) == lr_at_epoch(cfg, t + 1)
        if t:
            assert math.isclose(lr_at_epoch(cfg, t) / lr_at_epoch(cfg, t - 2), 0.975, rel_tol=1e-12)


def test_lr_negative_epoch():
    with pytest.raises(ValueError):
        lr_at_epoch(TrainConfig(), -1)


# -- optimizer -----------------------------------------------------------------------

def _one(value):
    return OrderedDict(w=np.array([value], np.float64))


def test_rmsprop_first_step_hand_values():
    cfg = TrainConfig(weight_decay=0.0)
    params, state = _one(1.0), OptimizerState()
    rmsprop_step(params, _one(1.0), state, 1e-3, cfg)
    assert math.isclose(state.v["w"][0], 0.1, rel_tol=1e-12)
    assert math.isclose(state.m["w"][0], 1 / math.sqrt(0.1 + 1e-8), rel_tol=1e-12)
    assert abs(state.m["w"][0] - 3.16228) < 1e-5
    assert abs(params["w"][0] - 0.996838) < 1e-6


def test_rmsprop_momentum_recurrence():
    cfg = TrainConfig(weight_decay=1e-2)
    params, state = _one(2.0), OptimizerState()
    w, v, m = 2.0, 0.0, 0.0
    for g_raw in (0.5, -1.5, 0.25):
        rmsprop_step(params, _one(g_raw), state, 1e-2, cfg)
        g = g_raw + 1e-2 * w
        v = 0.9 * v + 0.1 * g * g
        m = 0.9 * m + g / math.sqrt(v + 1e-8)
        w -= 1e-2 * m
        assert math.isclose(params["w"][0], w, rel_tol=1e-12)
    assert state.steps == 3


def test_rmsprop_zero_gradient_fixed_point():
    cfg = TrainConfig(weight_decay=0.0)
    params, state = _one(0.7), OptimizerState()
    for _ in range(5):
        rmsprop_step(params, _one(0.0), state, 1e-3, cfg)
    assert params["w"][0] == 0.7


def test_weight_decay_shrinks_norm(rng):
    cfg = TrainConfig(weight_decay=1e-1, momentum=0.0)
    params = OrderedDict(w=rng.standard_normal(50))
    state = OptimizerState()
    norm = np.linalg.norm(params["w"])
    for _ in range(5):
        rmsprop_step(params, OrderedDict(w=np.zeros(50)), state, 1e-3, cfg)
        new = np.linalg.norm(params["w"])
        assert new < norm
        norm = new


def test_rmsprop_shape_mismatch():
    with pytest.raises(ValueError):
        rmsprop_step(_one(1.0), OrderedDict(w=np.zeros(2)), OptimizerState(), 1e-3, TrainConfig())


def test_f16_master_weights_accumulate(rng):
    m = TakuNet(MINI.replace(precision="f16"))
    opt = Optimizer(m, TrainConfig(weight_decay=0.0))
    name = "classifier.b"
    assert opt.master[name].dtype == np.float32 and m.named_parameters()[name].dtype == np.float16
    start = opt.master[name].copy()
    grads = OrderedDict((k, np.zeros(p.shape, np.float32)) for k, p in m.named_parameters().items())
    grads[name] = np.ones(grads[name].shape, np.float32)
    for _ in range(10):
        opt.step(grads, 1e-6)
    assert np.all(opt.master[name] < start)
    assert np.array_equal(m.named_parameters()[name], opt.master[name].astype(np.float16))


# -- k-fold --------------------------------------------------------------------------

@given(st.integers(10, 80), st.integers(2, 6), st.integers(2, 5), st.integers(0, 100))
def test_kfold_properties(n, k, n_classes, seed):
    labels = np.arange(n) % n_classes
    if min(np.bincount(labels)) < k:
        return
    folds = kfold_split(range(n), k, seed, labels)
    assert len(folds) == k
    vals = [set(v.tolist()) for _, v in folds]
    assert set().union(*vals) == set(range(n))
    assert sum(len(v) for v in vals) == n
    sizes = [len(v) for v in vals]
    assert max(sizes) - min(sizes) <= 1
    for c in range(n_classes):
        per = [int(np.sum(labels[v] == c)) for _, v in folds]
        assert max(per) - min(per) <= 1
    for tr, va in folds:
        assert not set(tr.tolist()) & set(va.tolist())
        assert len(tr) + len(va) == n


def test_kfold_deterministic_and_errors():
    a = kfold_split(range(20), 4, seed=3)
    b = kfold_split(range(20), 4, seed=3)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        kfold_split(range(5), 1)
    with pytest.raises(ValueError):
        kfold_split(range(3), 4)
    with pytest.raises(ValueError):
        kfold_split(range(10), 3, labels=[0] * 8 + [1] * 2)


# -- epochs / fit ----------------------------------------------------------------------

def test_empty_epoch_errors():
    m = TakuNet(MINI)
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        train_epoch(m, iter([]), Optimizer(m, cfg), cfg, 0)


def test_duplicate_batch_eval_loss_identical(synth64):
    idx = index_dataset(synth64, seed=0, test_pct=0)
    m = TakuNet(MINI)
    batch = next(batch_iterator(idx, "train", 16, None, None, (64, 64)))
    a = evaluate(m, [batch, batch], 5)
    b = evaluate(m, [batch], 5)
    assert a.loss == b.loss


def test_miniature_overfits(synth64):
    idx = index_dataset(synth64, seed=0, test_pct=0)
    cfg = TrainConfig(batch_size=16, k_folds=1, augment=False)
    m = TakuNet(MINI)
    opt = Optimizer(m, cfg)
    cache = ImageCache()
    losses = []
    for epoch in range(200):
        batches = batch_iterator(idx, "train", cfg.batch_size, 1, None, (64, 64), epoch, np.float32, cache)
        losses.append(train_epoch(m, batches, opt, cfg, epoch).loss)
        if losses[-1] < 0.05:
            break
    assert losses[-1] < 0.05, losses[-5:]


def _small_fit(synth64, **kw):
    idx = index_dataset(synth64, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=16, **kw)
    return fit(MINI, idx, cfg, timing=False)


def test_fit_deterministic(synth64):
    a = _small_fit(synth64, k_folds=1)
    b = _small_fit(synth64, k_folds=1)
    assert a.log_text() == b.log_text()
    assert all(np.array_equal(a.best_state[k], b.best_state[k]) for k in a.best_state)
    assert all(e["wall_ms"] is None for e in a.log)


def test_fit_kfold_logs_every_fold(synth64):
    res = _small_fit(synth64, k_folds=5, augment=False)
    assert sorted({e["fold"] for e in res.log}) == [0, 1, 2, 3, 4]
    assert len(res.log) == 10
    keys = {"epoch", "fold", "lr", "train_loss", "val_loss", "val_f1_macro", "wall_ms"}
    assert all(set(e) == keys for e in res.log)
    assert res.best_f1 == max(e["val_f1_macro"] for e in res.log)


def test_fit_early_stop_on_train_accuracy(synth64):
    res = _small_fit(synth64, k_folds=1, augment=False, target_train_accuracy=0.0001)
    assert len(res.log) == 1
