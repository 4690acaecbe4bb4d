"""Zero-shot evaluation and coarse (whole-unit) alignment.

Scorers rank heads by correlation with the output (``U``), the same
correlation restricted to the task span (``UT``), or by the head's own
zero-shot accuracy (``S``). Baselines are random head subsets (``R``), all
heads (``H``) and the untouched output (``B``); ``O`` learns one scalar per
head by gradient descent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import TaskSpec, Trace, UnitId, UnitKind, UnitTensor, ValidationError, as_matrix
from .training import EpochRecord, OptimConfig, cosine_ce, train


class ScoreMethod(str, enum.Enum):
    U = "U"
    UT = "UT"
    S = "S"


@dataclass(frozen=True)
class UnitScore:
    unit: UnitId
    method: ScoreMethod
    value: float


@dataclass(frozen=True)
class Selection:
    units: frozenset[UnitId]
    method: str
    k: int

    def __post_init__(self):
        object.__setattr__(self, "units", frozenset(self.units))
        if len(self.units) != self.k:
            raise ValidationError(f"selection of {len(self.units)} units declared k={self.k}")


def _labels(labels, n_classes: int, n: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if lab.shape[0] != n:
        raise ValidationError(f"{lab.shape[0]} labels for {n} samples")
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    return lab


def predict(enc, task: TaskSpec) -> np.ndarray:
    """Index of the most cosine-similar class per row (lowest index on ties)."""
    x = as_matrix(enc, name="encodings")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValidationError("zero-norm encoding row")
    if x.shape[1] != task.encodings.shape[1]:
        raise ValidationError(f"encoding width {x.shape[1]} != task width {task.encodings.shape[1]}")
    sims = (x / norms[:, None]) @ task.normalized.T
    return np.argmax(sims, axis=1)


def zeroshot_eval(enc, task: TaskSpec, labels) -> float:
    x = enc.data if isinstance(enc, UnitTensor) else enc
    pred = predict(x, task)
    lab = _labels(labels, task.n_classes, pred.shape[0])
    return float(np.mean(pred == lab))


def build_prototypes(enc, labels, n_classes: int | None = None,
                     class_names: Sequence[str] | None = None) -> TaskSpec:
    """Per-class mean encodings as a zero-shot task."""
    x = as_matrix(enc.data if isinstance(enc, UnitTensor) else enc)
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if n_classes is None:
        n_classes = int(lab.max()) + 1
    lab = _labels(lab, n_classes, x.shape[0])
    protos = np.zeros((n_classes, x.shape[1]))
    for c in range(n_classes):
        members = x[lab == c]
        if members.shape[0] == 0:
            raise ValidationError(f"class {c} has no samples")
        protos[c] = members.mean(axis=0)
    names = tuple(class_names) if class_names is not None else tuple(f"class_{c}" for c in range(n_classes))
    return TaskSpec(names, protos)


def _rowwise_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValidationError("constant row: Pearson correlation undefined")
    return np.sum(a * b, axis=1) / (na * nb)


def _pair(head, output) -> tuple[np.ndarray, np.ndarray, UnitId | None]:
    h = head.data if isinstance(head, UnitTensor) else as_matrix(head)
    y = output.data if isinstance(output, UnitTensor) else as_matrix(output)
    if h.shape != y.shape:
        raise ValidationError(f"head shape {h.shape} != output shape {y.shape}")
    return h, y, head.unit if isinstance(head, UnitTensor) else None


def score_unsupervised(head, output) -> UnitScore:
    h, y, unit = _pair(head, output)
    return UnitScore(unit, ScoreMethod.U, float(np.mean(_rowwise_pearson(h, y))))


def task_basis(task: TaskSpec) -> np.ndarray:
    """Orthonormal rows spanning the class encodings (sign-fixed SVD)."""
    _, s, vt = np.linalg.svd(task.encodings, full_matrices=False)
    keep = s > 1e-10 * s[0]
    q = vt[keep]
    pivots = np.argmax(np.abs(q), axis=1)
    q *= np.sign(q[np.arange(q.shape[0]), pivots])[:, None]
    return q


def score_task_conditioned(head, output, task: TaskSpec) -> UnitScore:
    """Row-wise Pearson correlation of the coordinates in the task span."""
    h, y, unit = _pair(head, output)
    q = task_basis(task)
    if q.shape[0] < 2:
        raise ValidationError("degenerate task span (rank < 2)")
    return UnitScore(unit, ScoreMethod.UT, float(np.mean(_rowwise_pearson(h @ q.T, y @ q.T))))


def score_supervised(head, task: TaskSpec, labels) -> UnitScore:
    unit = head.unit if isinstance(head, UnitTensor) else None
    return UnitScore(unit, ScoreMethod.S, zeroshot_eval(head, task, labels))


def select_topk(scores: Sequence[UnitScore], fraction: float = 0.05, k: int | None = None) -> Selection:
    """Greedy top-k: highest values first, ties broken by ``(layer, index)``."""
    if not scores:
        raise ValidationError("no scores to select from")
    if k is None:
        # guard against 0.05 * 20 = 1.0000000000000002
        k = max(1, math.ceil(fraction * len(scores) - 1e-9))
    if not 0 < k <= len(scores):
        raise ValidationError(f"k={k} outside [1, {len(scores)}]")
    ranked = sorted(scores, key=lambda s: (-s.value, s.unit.layer, s.unit.index))
    return Selection(frozenset(s.unit for s in ranked[:k]), str(ranked[0].method.value), k)


def random_selection(heads: Sequence[UnitId], k: int, seeds: Iterable[int]) -> list[Selection]:
    """One uniform draw of ``k`` heads without replacement per seed."""
    heads = list(heads)
    if k > len(heads) or k < 0:
        raise ValidationError(f"cannot draw {k} of {len(heads)} heads")
    out = []
    for seed in seeds:
        idx = np.random.default_rng(seed).choice(len(heads), size=k, replace=False)
        out.append(Selection(frozenset(heads[i] for i in idx), "R", k))
    return out


def selection_jaccard(a: Selection | Iterable[UnitId], b: Selection | Iterable[UnitId]) -> float:
    sa = a.units if isinstance(a, Selection) else frozenset(a)
    sb = b.units if isinstance(b, Selection) else frozenset(b)
    union = sa | sb
    return 1.0 if not union else len(sa & sb) / len(union)


def partial_output(units: Selection | Iterable[UnitId], trace: Trace, split: str) -> UnitTensor:
    """Sum of the selected unit tensors only."""
    chosen = list(units.units if isinstance(units, Selection) else units)
    if not chosen:
        raise ValidationError("empty selection")
    total = np.zeros((trace.manifest.n_samples(split), trace.manifest.d_out))
    for u in chosen:
        if u.kind is UnitKind.OUTPUT:
            raise ValidationError("the output unit cannot be part of a partial residual")
        total += trace.unit(split, u).data
    return UnitTensor(UnitId.output(), total)


def heads_baseline(trace: Trace, split: str) -> UnitTensor:
    return partial_output(trace.head_units, trace, split)


def check_task(task: TaskSpec) -> None:
    enc = task.normalized
    if np.allclose(enc, enc[0], atol=1e-12):
        raise ValidationError("degenerate task: all class encodings are identical")


@dataclass(frozen=True)
class WeightFit:
    weights: dict[UnitId, float]
    val_accuracy: float
    test_accuracy: float | None
    best_epoch: int
    history: tuple[EpochRecord, ...]


def _stack(tensors: Mapping[UnitId, UnitTensor], order: Sequence[UnitId]) -> np.ndarray:
    return np.stack([tensors[u].data for u in order])


def optimize_unit_weights(trace: Trace, task: TaskSpec, cfg: OptimConfig = OptimConfig(), *,
                          train_split: str = "train", val_split: str = "val",
                          test_split: str | None = "test", init: float = 1.0) -> WeightFit:
    """Learn one scalar per head for ``Y' = sum_h w_h H_h`` on the zero-shot loss."""
    check_task(task)
    heads = trace.head_units
    classes = task.normalized
    h_tr = _stack(trace.heads(train_split), heads)
    y_tr = trace.labels(train_split)
    h_va = _stack(trace.heads(val_split), heads)
    y_va = trace.labels(val_split)

    def loss_grad(w, idx):
        hb = h_tr[:, idx]
        enc = np.tensordot(w, hb, axes=1)
        loss, g = cosine_ce(enc, classes, y_tr[idx], cfg.tau)
        return loss, np.einsum("hnd,nd->h", hb, g)

    def val_acc(w):
        return zeroshot_eval(np.tensordot(w, h_va, axes=1), task, y_va)

    res = train(np.full(len(heads), float(init)), loss_grad, val_acc, h_tr.shape[1], cfg)
    test_acc = None
    if test_split is not None:
        h_te = _stack(trace.heads(test_split), heads)
        test_acc = zeroshot_eval(np.tensordot(res.params, h_te, axes=1), task, trace.labels(test_split))
    weights = {u: float(w) for u, w in zip(heads, res.params)}
    return WeightFit(weights, res.best_val_acc, test_acc, res.best_epoch, res.history)


@dataclass(frozen=True)
class LinearAligner:
    matrix: np.ndarray
    bias: np.ndarray
    val_accuracy: float
    test_accuracy: float | None
    best_epoch: int
    history: tuple[EpochRecord, ...]

    @property
    def n_params(self) -> int:
        return self.matrix.size + self.bias.size

    def transform(self, enc) -> np.ndarray:
        return as_matrix(enc) @ self.matrix + self.bias


def linear_param_count(d_out: int, bias: bool = True) -> int:
    return d_out * d_out + (d_out if bias else 0)


def fit_linear_aligner(train_enc, train_labels, val_enc, val_labels, task: TaskSpec,
                       cfg: OptimConfig = OptimConfig(), *, test_enc=None, test_labels=None) -> LinearAligner:
    """Affine map ``Y A + c`` on the output encoding, initialized at the identity."""
    check_task(task)
    x_tr, x_va = as_matrix(train_enc), as_matrix(val_enc)
    y_tr = _labels(train_labels, task.n_classes, x_tr.shape[0])
    y_va = _labels(val_labels, task.n_classes, x_va.shape[0])
    d = x_tr.shape[1]
    classes = task.normalized

    def unpack(p):
        return p[:d * d].reshape(d, d), p[d * d:]

    def loss_grad(p, idx):
        a, c = unpack(p)
        xb = x_tr[idx]
        loss, g = cosine_ce(xb @ a + c, classes, y_tr[idx], cfg.tau)
        return loss, np.concatenate([(xb.T @ g).ravel(), g.sum(axis=0)])

    def val_acc(p):
        a, c = unpack(p)
        return zeroshot_eval(x_va @ a + c, task, y_va)

    init = np.concatenate([np.eye(d).ravel(), np.zeros(d)])
    res = train(init, loss_grad, val_acc, x_tr.shape[0], cfg)
    a, c = unpack(res.params)
    test_acc = None
    if test_enc is not None:
        test_acc = zeroshot_eval(as_matrix(test_enc) @ a + c, task, test_labels)
    return LinearAligner(a, c, res.best_val_acc, test_acc, res.best_epoch, res.history)
