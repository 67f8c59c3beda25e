"""
Training loop: momentum RMSProp with coupled L2 decay, the step learning-rate
schedule, stratified k-fold splitting and the ``fit`` driver that writes the
per-epoch metrics log.
"""

from __future__ import annotations

import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import ArchConfig, TrainConfig
from .data import AugmentationPolicy, DatasetIndex, ImageCache, Record, batch_iterator
from .metrics import evaluate
from .model import TakuNet
from .ops import softmax_cross_entropy
from .tensor import Precision


def lr_at_epoch(cfg: TrainConfig, t: int) -> float:
    """``lr0 * gamma ** floor(t / step_size)``."""
    if t < 0:
        raise ValueError("epoch index must be non-negative")
    return cfg.lr0 * cfg.gamma ** (t // cfg.step_size)


# -- optimizer --------------------------------------------------------------------

@dataclass
class OptimizerState:
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    steps: int = 0

    @classmethod
    def create(cls, params: Dict[str, np.ndarray]) -> "OptimizerState":
        st = cls()
        for name, p in params.items():
            acc = np.float64 if p.dtype == np.float64 else np.float32
            st.v[name] = np.zeros(p.shape, acc)
            st.m[name] = np.zeros(p.shape, acc)
        return st


def rmsprop_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
                 lr: float, cfg: TrainConfig) -> Dict[str, np.ndarray]:
    """One in-place update of ``params`` (and ``state``)::

        g = grad + weight_decay * w
        v = rms_decay * v + (1 - rms_decay) * g**2
        m = momentum * m + g / sqrt(v + eps)
        w = w - lr * m

    ``momentum = 0`` gives plain RMSProp.
    """
    a, mu, wd, eps = cfg.rms_decay, cfg.momentum, cfg.weight_decay, cfg.eps
    for name, w in params.items():
        grad = grads[name]
        if grad.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != parameter shape {w.shape}")
        if name not in state.v:
            acc = np.float64 if w.dtype == np.float64 else np.float32
            state.v[name] = np.zeros(w.shape, acc)
            state.m[name] = np.zeros(w.shape, acc)
        v, m = state.v[name], state.m[name]
        g = grad.astype(v.dtype) + v.dtype.type(wd) * w.astype(v.dtype)
        v *= a
        v += (1 - a) * g * g
        m *= mu
        m += g / np.sqrt(v + v.dtype.type(eps))
        w -= (lr * m).astype(w.dtype)
    state.steps += 1
    return params


class Optimizer:
    """RMSProp over a model's parameters with full-precision master weights.

    For f16 models the masters are f32 copies and the f16 parameters are
    refreshed from them after every step; otherwise the parameters are updated
    directly.
    """

    def __init__(self, model: TakuNet, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.params = model.named_parameters()
        self.master = OrderedDict(
            (k, p.astype(np.float32) if p.dtype == np.float16 else p) for k, p in self.params.items()
        )
        self.state = OptimizerState.create(self.master)

    @property
    def v(self):
        return self.state.v

    @property
    def m(self):
        return self.state.m

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        rmsprop_step(self.master, grads, self.state, lr, self.cfg)
        for k, p in self.params.items():
            if p is not self.master[k]:
                p[...] = self.master[k].astype(p.dtype)


# -- epochs -------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float
    accuracy: float
    samples: int
    steps: int


def train_epoch(model: TakuNet, batches: Iterable[Tuple[np.ndarray, np.ndarray]], opt: Optimizer,
                cfg: TrainConfig, epoch: int) -> EpochStats:
    """One optimizer step per batch at ``lr_at_epoch(cfg, epoch)``; returns the sample-weighted mean loss."""
    lr = lr_at_epoch(cfg, epoch)
    loss_sum, correct, n, steps = 0.0, 0, 0, 0
    for x, y in batches:
        logits = model.forward(x, train=True)
        loss, grad = softmax_cross_entropy(logits, y)
        grads = model.backward(grad)
        opt.step(grads, lr)
        loss_sum += float(loss) * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        n += len(y)
        steps += 1
    if steps == 0:
        raise ValueError("train_epoch received no batches")
    return EpochStats(loss_sum / n, correct / n, n, steps)


# -- k-fold -------------------------------------------------------------------------

def kfold_split(indices: Sequence[int], k: int, seed: int = 0,
                labels: Optional[Sequence[int]] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold partition of ``indices``; returns ``[(train, val), ...]``.

    Each class is shuffled and dealt round-robin across folds, continuing from
    the fold where the previous class stopped, so both overall fold sizes and
    per-class fold counts differ by at most one.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    if idx.size < k:
        raise ValueError(f"need at least k={k} items, got {idx.size}")
    lab = np.zeros(idx.size, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if lab.shape != idx.shape:
        raise ValueError("labels must align with indices")
    rng = np.random.default_rng(seed)
    folds: List[List[int]] = [[] for _ in range(k)]
    cursor = 0
    for c in np.unique(lab):
        members = idx[lab == c]
        if labels is not None and members.size < k:
            raise ValueError(f"class {int(c)} has {members.size} samples, fewer than k={k}")
        for item in members[rng.permutation(members.size)]:
            folds[cursor % k].append(int(item))
            cursor += 1
    out = []
    for f in range(k):
        val = np.array(sorted(folds[f]), dtype=np.int64)
        train = np.array(sorted(i for g in range(k) if g != f for i in folds[g]), dtype=np.int64)
        out.append((train, val))
    return out


# -- fit ----------------------------------------------------------------------------

def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def format_log_line(entry: dict) -> str:
    return json.dumps(entry, separators=(", ", ": ")) + "\n"


@dataclass
class FitResult:
    best_state: "OrderedDict[str, np.ndarray]"
    best_f1: float
    best_epoch: int
    best_fold: int
    log: List[dict]
    arch: ArchConfig
    history: List[dict] = field(default_factory=list)

    def log_text(self) -> str:
        return "".join(format_log_line(e) for e in self.log)

    def best_model(self) -> TakuNet:
        model = TakuNet(self.arch.replace(precision=Precision.F32))
        model.set_precision(self.arch.precision)
        model.load_state_dict(self.best_state)
        return model


def _fold_plan(index: DatasetIndex, cfg: TrainConfig) -> List[Tuple[int, List[Record], List[Record]]]:
    train = index.split("train")
    if not train:
        raise ValueError("dataset has no training records")
    if cfg.k_folds >= 2:
        labels = [r.label for r in train]
        folds = kfold_split(range(len(train)), cfg.k_folds, cfg.seed, labels)
        return [(f, [train[i] for i in tr], [train[i] for i in va]) for f, (tr, va) in enumerate(folds)]
    val = index.split("val") or index.split("test") or train
    return [(0, train, val)]


def fit(arch: ArchConfig, index: DatasetIndex, cfg: TrainConfig, *, timing: bool = True,
        policy: Optional[AugmentationPolicy] = None,
        on_epoch: Optional[Callable[[dict], None]] = None,
        cache: Optional[ImageCache] = None) -> FitResult:
    """Train per ``cfg`` and keep the state with the best validation macro-F1.

    With ``k_folds >= 2`` the training split is cross-validated and every fold
    trains a fresh model. With ``k_folds == 1`` the whole training split is
    used and validation runs on ``val`` if present, else ``test``, else the
    (unaugmented) training records. Setting ``target_train_accuracy`` stops a
    fold early once eval-mode accuracy on the clean training records reaches it.
    """
    arch = arch.replace(precision=cfg.precision, num_classes=len(index.classes))
    if policy is None:
        policy = AugmentationPolicy(seed=cfg.seed) if cfg.augment else None
    cache = cache if cache is not None else ImageCache()
    log: List[dict] = []
    history: List[dict] = []
    best = (-1.0, 0, 0, None)
    for fold, train_recs, val_recs in _fold_plan(index, cfg):
        model = TakuNet(arch, seed=_derived_seed(cfg.seed, fold, 0))
        opt = Optimizer(model, cfg)
        shuffle_seed = _derived_seed(cfg.seed, fold, 1)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            batches = batch_iterator(index, train_recs, cfg.batch_size, shuffle_seed, policy,
                                     arch.input_size, epoch, model.precision.dtype, cache)
            stats = train_epoch(model, batches, opt, cfg, epoch)
            val = evaluate(model, batch_iterator(index, val_recs, cfg.batch_size, None, None,
                                                 arch.input_size, 0, model.precision.dtype, cache),
                           arch.num_classes)
            train_acc = None
            if cfg.target_train_accuracy > 0:
                if val_recs is train_recs:
                    train_acc = val.accuracy
                else:
                    train_acc = evaluate(model, batch_iterator(index, train_recs, cfg.batch_size, None, None,
                                                               arch.input_size, 0, model.precision.dtype, cache),
                                         arch.num_classes).accuracy
            wall = (time.perf_counter() - t0) * 1000.0
            entry = {
                "epoch": epoch,
                "fold": fold,
                "lr": lr_at_epoch(cfg, epoch),
                "train_loss": stats.loss,
                "val_loss": val.loss,
                "val_f1_macro": val.f1_macro,
                "wall_ms": round(wall, 3) if timing else None,
            }
            log.append(entry)
            history.append(dict(entry, train_batch_accuracy=stats.accuracy, train_accuracy=train_acc,
                                val_accuracy=val.accuracy))
            if on_epoch is not None:
                on_epoch(history[-1])
            if val.f1_macro > best[0]:
                state = OrderedDict((k, v.copy()) for k, v in model.state_dict().items())
                best = (val.f1_macro, epoch, fold, state)
            if train_acc is not None and train_acc >= cfg.target_train_accuracy:
                break
    f1, epoch, fold, state = best
    if state is None:
        raise ValueError("no epochs were run (epochs must be >= 1 to fit)")
    return FitResult(state, f1, epoch, fold, log, arch, history)
