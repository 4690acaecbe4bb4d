"""ResiDual: learnable per-component scaling of every residual unit.

Each unit ``X`` is expressed in its (frozen) PCA basis, each coordinate is
scaled by a learnable ``lambda`` and the result is mapped back to output
space; the modified output is the sum over units. With ``recenter=True``
(the default) the unit mean is added back, so ``lambda = 1`` with full-rank
bases reproduces the original output exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .align import check_task, zeroshot_eval
from .core import (TaskSpec, Trace, TraceManifest, UnitId, UnitKind, UnitTensor, ValidationError,
                   as_matrix, read_vector, sort_units, write_vector)
from .spectra import PcaBasis, fit_pca, linear_id
from .training import EpochRecord, OptimConfig, cosine_ce, train


class Variant(str, enum.Enum):
    RD = "RD"
    RD_STAR = "RD_star"
    RD_Y = "RD_Y"


@dataclass(frozen=True)
class RdConfig:
    variant: Variant = Variant.RD
    evr_truncation: float = 0.9
    include_embed: bool = False
    basis_source: str = "train"
    recenter: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.0 < self.evr_truncation <= 1.0:
            raise ValidationError("evr_truncation must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class LambdaSet:
    entries: Mapping[UnitId, np.ndarray]
    recenter: bool = True

    def __post_init__(self):
        clean = {}
        for u, lam in self.entries.items():
            v = np.asarray(lam, dtype=np.float64).ravel()
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"non-finite lambda for {u}")
            clean[u] = v
        object.__setattr__(self, "entries", clean)

    @classmethod
    def ones(cls, bases: Mapping[UnitId, PcaBasis], recenter: bool = True) -> "LambdaSet":
        return cls({u: np.ones(b.n_components) for u, b in bases.items()}, recenter)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def flat(self, order) -> np.ndarray:
        return np.concatenate([self.entries[u] for u in order]) if order else np.zeros(0)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"recenter": self.recenter, "entries": []}
        for u in sort_units(self.entries):
            name = f"lambda.{u.name}.rdt"
            write_vector(directory / name, self.entries[u])
            index["entries"].append({"unit": u.to_json(), "path": name})
        (directory / "lambdas.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "LambdaSet":
        directory = Path(directory)
        index = json.loads((directory / "lambdas.json").read_text())
        entries = {UnitId.from_json(e["unit"]): read_vector(directory / e["path"]) for e in index["entries"]}
        return cls(entries, bool(index["recenter"]))


def rd_transform(x, basis: PcaBasis, lam, recenter: bool = True) -> np.ndarray:
    """``((X - mu) Phi^T diag(lam)) Phi`` (+ ``mu`` when recentering).

    Directions outside the basis span are removed.
    """
    data = x.data if isinstance(x, UnitTensor) else as_matrix(x)
    lam = np.asarray(lam, dtype=np.float64).ravel()
    if lam.size != basis.n_components:
        raise ValidationError(f"lambda length {lam.size} != basis size {basis.n_components}")
    out = (basis.coordinates(data) * lam) @ basis.components
    return out + basis.mean if recenter else out


def truncate_basis(basis: PcaBasis, evr_threshold: float) -> PcaBasis:
    """Keep the fewest leading components whose cumulative EVR reaches the threshold."""
    if not 0.0 < evr_threshold <= 1.0:
        raise ValidationError("threshold must be in (0, 1]")
    if evr_threshold >= 1.0:
        return basis
    return basis.truncated(linear_id(basis, evr_threshold))


def reweighted_units(manifest: TraceManifest, cfg: RdConfig) -> list[UnitId]:
    if cfg.variant is Variant.RD_Y:
        return [UnitId.output()]
    units = manifest.head_units()
    if cfg.variant is Variant.RD:
        units = units + manifest.mlp_units()
        if cfg.include_embed:
            units = [UnitId.embed()] + units
    return sort_units(units)


def fit_bases(trace: Trace, cfg: RdConfig) -> dict[UnitId, PcaBasis]:
    """PCA bases of every reweighted unit on the reference split."""
    bases = {}
    for u in reweighted_units(trace.manifest, cfg):
        b = fit_pca(trace.unit(cfg.basis_source, u))
        if cfg.variant is Variant.RD_STAR:
            b = truncate_basis(b, cfg.evr_truncation)
        bases[u] = b
    return bases


def rd_param_count(manifest: TraceManifest, cfg: RdConfig, bases: Mapping[UnitId, PcaBasis] | None = None) -> int:
    """Number of learnable scalings.

    Without bases this is the rank-bound formula: ``d_head`` per head and
    ``d_out`` per MLP (and embed, if included) for RD, ``d_out`` for RD_Y
    and the ``d_head`` upper bound per head for RD_star. With bases, the
    actual (possibly truncated) basis sizes are summed.
    """
    units = reweighted_units(manifest, cfg)
    if bases is not None:
        missing = [u for u in units if u not in bases]
        if missing:
            raise ValidationError(f"missing basis for {missing[0]}")
        return int(sum(bases[u].n_components for u in units))
    total = 0
    for u in units:
        total += manifest.d_head if u.is_head else manifest.d_out
    return total


class _Problem:
    """Precomputed pieces of ``Y'(lambda) = const + (C * lambda) @ Phi`` for one set of samples."""

    def __init__(self, units: Mapping[UnitId, np.ndarray], bases: Mapping[UnitId, PcaBasis],
                 order: list[UnitId], recenter: bool, variant: Variant):
        if variant is Variant.RD_Y:
            try:
                out = units[UnitId.output()]
            except KeyError:
                raise ValidationError("RD_Y needs the output unit") from None
            sources = {UnitId.output(): out}
            passthrough = []
        else:
            sources = {u: x for u, x in units.items() if u.kind is not UnitKind.OUTPUT}
            passthrough = [u for u in sources if u not in order]
        for u in order:
            if u not in bases:
                raise ValidationError(f"missing basis for {u}")
            if u not in sources:
                raise ValidationError(f"missing unit {u}")
        first = next(iter(sources.values()))
        self.n, self.d = first.shape
        self.const = np.zeros((self.n, self.d))
        for u in passthrough:
            self.const += sources[u]
        coords, comps, self.sizes = [], [], []
        for u in order:
            b = bases[u]
            coords.append(b.coordinates(sources[u]))
            comps.append(b.components)
            self.sizes.append(b.n_components)
            if recenter:
                self.const += b.mean
        self.coords = np.hstack(coords) if coords else np.zeros((self.n, 0))
        self.comps = np.vstack(comps) if comps else np.zeros((0, self.d))

    def output(self, lam: np.ndarray, idx=slice(None)) -> np.ndarray:
        return self.const[idx] + (self.coords[idx] * lam) @ self.comps

    def loss_grad(self, lam: np.ndarray, classes: np.ndarray, labels: np.ndarray, tau: float, idx=slice(None)):
        loss, g = cosine_ce(self.output(lam, idx), classes, labels, tau)
        return loss, np.sum(self.coords[idx] * (g @ self.comps.T), axis=0)


def _as_arrays(units: Mapping[UnitId, UnitTensor | np.ndarray]) -> dict[UnitId, np.ndarray]:
    return {u: (t.data if isinstance(t, UnitTensor) else as_matrix(t)) for u, t in units.items()}


def _order(lambdas: LambdaSet, bases: Mapping[UnitId, PcaBasis], cfg: RdConfig) -> list[UnitId]:
    order = sort_units(lambdas.entries)
    for u in order:
        if u not in bases:
            raise ValidationError(f"missing basis for {u}")
        if lambdas.entries[u].size != bases[u].n_components:
            raise ValidationError(f"{u}: lambda length {lambdas.entries[u].size} != basis size {bases[u].n_components}")
    if cfg.variant is Variant.RD_Y and order != [UnitId.output()]:
        raise ValidationError("RD_Y lambdas must cover exactly the output unit")
    return order


def rd_output(units: Mapping[UnitId, UnitTensor | np.ndarray], bases: Mapping[UnitId, PcaBasis],
              lambdas: LambdaSet, cfg: RdConfig = RdConfig()) -> UnitTensor:
    """Modified output: transformed reweighted units plus untouched remaining units."""
    order = _order(lambdas, bases, cfg)
    prob = _Problem(_as_arrays(units), bases, order, lambdas.recenter, cfg.variant)
    return UnitTensor(UnitId.output(), prob.output(lambdas.flat(order)))


def rd_loss_and_grad(lambdas: LambdaSet, units: Mapping[UnitId, UnitTensor | np.ndarray],
                     bases: Mapping[UnitId, PcaBasis], task: TaskSpec, labels, cfg: RdConfig = RdConfig(),
                     tau: float = 100.0) -> tuple[float, dict[UnitId, np.ndarray]]:
    """Cross-entropy of ``tau``-scaled cosine logits and its gradient per lambda entry."""
    order = _order(lambdas, bases, cfg)
    prob = _Problem(_as_arrays(units), bases, order, lambdas.recenter, cfg.variant)
    labels = np.asarray(labels, dtype=np.int64)
    if prob.n == 0:
        raise ValidationError("empty batch")
    loss, g = prob.loss_grad(lambdas.flat(order), task.normalized, labels, tau)
    out, pos = {}, 0
    for u, m in zip(order, prob.sizes):
        out[u] = g[pos:pos + m]
        pos += m
    return loss, out


@dataclass(frozen=True)
class ResidualFit:
    lambdas: LambdaSet
    bases: dict[UnitId, PcaBasis]
    config: RdConfig
    n_params: int
    best_epoch: int
    history: tuple[EpochRecord, ...]
    base_val_accuracy: float
    base_test_accuracy: float | None
    val_accuracy: float
    test_accuracy: float | None
    extra: dict = field(default_factory=dict)


def evaluate_lambdas(trace: Trace, split: str, task: TaskSpec, bases: Mapping[UnitId, PcaBasis],
                     lambdas: LambdaSet, cfg: RdConfig) -> float:
    units = trace.units(split, include_output=True)
    return zeroshot_eval(rd_output(units, bases, lambdas, cfg), task, trace.labels(split))


def fit_residual(trace: Trace, task: TaskSpec, cfg: RdConfig = RdConfig(), optim: OptimConfig = OptimConfig(), *,
                 bases: Mapping[UnitId, PcaBasis] | None = None, train_split: str = "train",
                 val_split: str = "val", test_split: str | None = "test") -> ResidualFit:
    """Train lambdas (initialized at one) with early stopping on validation accuracy."""
    check_task(task)
    for split in (train_split, val_split) + ((test_split,) if test_split else ()):
        if split not in trace.splits:
            raise ValidationError(f"trace has no split {split!r}")
    bases = dict(bases) if bases is not None else fit_bases(trace, cfg)
    order = reweighted_units(trace.manifest, cfg)
    lambdas0 = LambdaSet({u: np.ones(bases[u].n_components) for u in order}, cfg.recenter)
    classes = task.normalized

    def problem(split):
        return _Problem(_as_arrays(trace.units(split, include_output=True)), bases, order, cfg.recenter, cfg.variant)

    p_tr, p_va = problem(train_split), problem(val_split)
    y_tr, y_va = trace.labels(train_split), trace.labels(val_split)

    def loss_grad(lam, idx):
        return p_tr.loss_grad(lam, classes, y_tr[idx], optim.tau, idx)

    def val_acc(lam):
        return zeroshot_eval(p_va.output(lam), task, y_va)

    init = lambdas0.flat(order)
    res = train(init, loss_grad, val_acc, p_tr.n, optim)
    entries, pos = {}, 0
    for u, m in zip(order, p_tr.sizes):
        entries[u] = res.params[pos:pos + m]
        pos += m
    lambdas = LambdaSet(entries, cfg.recenter)
    base_val = zeroshot_eval(trace.output(val_split), task, y_va)
    base_test = test_acc = None
    if test_split:
        p_te = problem(test_split)
        y_te = trace.labels(test_split)
        base_test = zeroshot_eval(trace.output(test_split), task, y_te)
        test_acc = zeroshot_eval(p_te.output(res.params), task, y_te)
    return ResidualFit(lambdas, bases, cfg, lambdas.n_params, res.best_epoch, res.history,
                       base_val, base_test, res.best_val_acc, test_acc)
