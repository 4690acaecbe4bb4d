"""Loss, optimizer and early-stopping loop shared by every trained aligner.

All aligners are trained on cross-entropy over ``tau``-scaled cosine logits
between the (modified) output encoding and the class encodings, with Adam
and early stopping on validation accuracy. Gradients are derived by hand.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .core import TrainingError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch: int = 256
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    tau: float = 100.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.max_epochs < 0 or self.patience < 1 or self.tau <= 0:
            raise ValidationError(f"invalid optimizer config {self}")

    @classmethod
    def from_json(cls, obj: dict | str | Path) -> "OptimConfig":
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)


def cosine_ce(enc: np.ndarray, classes: np.ndarray, labels: np.ndarray, tau: float,
              *, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """Mean cross-entropy of ``tau * cos(enc_i, class_c)`` logits and its gradient w.r.t. ``enc``.

    ``classes`` must already be row-normalized.
    """
    norms = np.linalg.norm(enc, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise ValidationError("zero-norm encoding row")
    unit = enc / norms
    logits = tau * unit @ classes.T
    logits -= logits.max(axis=1, keepdims=True)
    expz = np.exp(logits)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = enc.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(np.log(probs[rows, labels])))
    if not need_grad:
        return loss, None
    dlogits = probs
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    dunit = tau * dlogits @ classes
    # d(x/|x|) = (I - u u^T) / |x|
    denc = (dunit - unit * np.sum(dunit * unit, axis=1, keepdims=True)) / norms
    return loss, denc


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass(frozen=True)
class TrainResult:
    params: np.ndarray
    best_epoch: int
    best_val_acc: float
    history: tuple[EpochRecord, ...]


def train(params: np.ndarray,
          loss_grad: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
          val_accuracy: Callable[[np.ndarray], float],
          n_train: int,
          cfg: OptimConfig) -> TrainResult:
    """Minibatch Adam with early stopping on validation accuracy.

    ``loss_grad(params, batch_idx)`` returns the batch loss and flat gradient.
    Epoch 0 is the untrained starting point; a later epoch replaces the best
    parameters only when it strictly improves validation accuracy.
    """
    if n_train < 1:
        raise ValidationError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    params = np.array(params, dtype=np.float64)
    opt = Adam(params.size, cfg.lr)
    best = params.copy()
    best_acc = val_accuracy(params)
    best_epoch = 0
    history = [EpochRecord(0, float(loss_grad(params, np.arange(n_train))[0]), best_acc)]
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, grad = loss_grad(params, idx)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"training diverged at epoch {epoch} (loss={loss})")
            params = opt.step(params, grad)
            losses.append(loss * len(idx))
        acc = val_accuracy(params)
        history.append(EpochRecord(epoch, float(np.sum(losses) / n_train), acc))
        log.debug("epoch %d loss %.5f val %.4f", epoch, history[-1].train_loss, acc)
        if acc > best_acc:
            best, best_acc, best_epoch, stale = params.copy(), acc, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best, best_epoch, best_acc, tuple(history))
