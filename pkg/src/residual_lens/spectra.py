"""Spectral geometry of residual units: PCA, explained variance and intrinsic dimension."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .core import UnitId, UnitTensor, ValidationError, as_matrix, read_tensor, write_tensor


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """Mean, row-orthonormal components (descending), singular values and EVR."""

    unit: UnitId | None
    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    evr: np.ndarray

    def __post_init__(self):
        comps = np.atleast_2d(np.asarray(self.components, dtype=np.float64))
        m = comps.shape[0]
        if len(self.singular_values) != m or len(self.evr) != m:
            raise ValidationError("components, singular values and evr must have equal length")
        if np.shape(self.mean) != (comps.shape[1],):
            raise ValidationError("mean must have length d_out")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "singular_values", np.asarray(self.singular_values, dtype=np.float64))
        object.__setattr__(self, "evr", np.asarray(self.evr, dtype=np.float64))

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def d_out(self) -> int:
        return self.components.shape[1]

    def truncated(self, m: int) -> "PcaBasis":
        return PcaBasis(self.unit, self.mean, self.components[:m], self.singular_values[:m], self.evr[:m])

    def coordinates(self, x) -> np.ndarray:
        return (as_matrix(x) - self.mean) @ self.components.T

    def save(self, path: str | Path) -> None:
        """``<path>.json`` sidecar plus three RDT1 tensors next to it."""
        path = Path(path)
        stem = path.with_suffix("")
        names = {k: f"{stem.name}.{k}.rdt" for k in ("mean", "components", "spectrum")}
        write_tensor(path.parent / names["mean"], self.mean[None, :])
        write_tensor(path.parent / names["components"], self.components)
        write_tensor(path.parent / names["spectrum"], np.vstack([self.singular_values, self.evr]))
        meta = {"unit": None if self.unit is None else self.unit.to_json(),
                "n_components": self.n_components, **names}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PcaBasis":
        path = Path(path).with_suffix(".json")
        meta = json.loads(path.read_text())
        spec = read_tensor(path.parent / meta["spectrum"]).data
        unit = None if meta["unit"] is None else UnitId.from_json(meta["unit"])
        return cls(unit, read_tensor(path.parent / meta["mean"]).data[0],
                   read_tensor(path.parent / meta["components"]).data, spec[0], spec[1])


@dataclass(frozen=True)
class IdProfile:
    unit: UnitId | None
    linear_id: int
    twonn_id: float
    ratio: float
    evr1: float
    reached_threshold: bool = True

    def as_row(self) -> dict:
        return {"unit": "" if self.unit is None else self.unit.name, "linear_id": self.linear_id,
                "twonn_id": self.twonn_id, "ratio": self.ratio, "evr1": self.evr1}


def _data_of(x) -> tuple[np.ndarray, UnitId | None]:
    if isinstance(x, UnitTensor):
        return x.data, x.unit
    return as_matrix(x), None


def fit_pca(x, max_components: int | None = None, *, rank_tol: float | None = None) -> PcaBasis:
    """PCA of a unit through the SVD of its centred samples.

    Components with singular value below ``rank_tol * s_max`` are dropped,
    so a rank-deficient unit gets a basis of its numerical rank. Each
    component's largest-magnitude entry is made positive.
    """
    data, unit = _data_of(x)
    n, d = data.shape
    if n < 2:
        raise ValidationError("PCA needs at least two samples")
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(s * s))
    if rank_tol is None:
        rank_tol = max(n, d) * np.finfo(np.float64).eps * 16
    keep = s > rank_tol * (s[0] if s.size else 0.0)
    m = int(np.count_nonzero(keep))
    m = min(m, n - 1, d)
    if max_components is not None:
        m = min(m, int(max_components))
    if m < 1 or total == 0.0:
        raise ValidationError("unit has zero variance; PCA is undefined")
    s, vt = s[:m], vt[:m].copy()
    pivots = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(m), pivots])
    vt *= signs[:, None]
    return PcaBasis(unit, mean, vt, s, (s * s) / total)


def linear_id(basis: PcaBasis, threshold: float = 0.99, *, return_flag: bool = False):
    """Smallest number of components whose cumulative EVR reaches ``threshold``.

    When the basis never reaches it, all ``m`` components are returned and
    the flag (with ``return_flag=True``) is ``False``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    evr = np.asarray(basis.evr if isinstance(basis, PcaBasis) else basis, dtype=np.float64)
    if evr.size == 0:
        raise ValidationError("empty explained-variance list")
    cum = np.cumsum(evr)
    # tolerance so that an exact 1.0 is not missed through rounding
    hits = np.flatnonzero(cum >= threshold - 1e-12)
    reached = hits.size > 0
    k = int(hits[0]) + 1 if reached else int(evr.size)
    return (k, reached) if return_flag else k


def twonn_id(x, discard_fraction: float = 0.1, seed: int | None = None, *,
             max_points: int | None = None) -> float:
    """TwoNN intrinsic dimension.

    For every point the ratio ``mu = r2 / r1`` of its second to first
    nearest-neighbour distance is Pareto distributed with exponent equal to
    the dimension. The largest ``discard_fraction`` ratios are treated as
    right-censored at the largest kept value, which keeps the maximum
    likelihood estimate unbiased; with no discarding this is ``N / sum(log mu)``.
    ``seed`` only matters when ``max_points`` subsamples the data.
    """
    data, _ = _data_of(x)
    if not 0.0 <= discard_fraction < 1.0:
        raise ValidationError("discard_fraction must be in [0, 1)")
    data = np.unique(data, axis=0)
    if data.shape[0] < 2:
        raise ValidationError("all points are duplicates")
    if max_points is not None and data.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        data = data[np.sort(rng.choice(data.shape[0], max_points, replace=False))]
    if data.shape[0] < 10:
        raise ValidationError(f"TwoNN needs at least 10 distinct points, got {data.shape[0]}")
    r1, r2 = kernels.two_nearest(data)
    return twonn_from_ratios(r2 / r1, discard_fraction)


def twonn_from_ratios(mu, discard_fraction: float = 0.0) -> float:
    """Censored maximum-likelihood dimension from nearest-neighbour distance ratios."""
    mu = np.sort(np.asarray(mu, dtype=np.float64))
    n = mu.size
    n_keep = n - int(np.floor(discard_fraction * n))
    logs = np.log(mu)
    kept = logs[:n_keep]
    censored = n - n_keep
    denom = kept.sum() + (censored * kept[-1] if censored else 0.0)
    if denom <= 0:
        raise ValidationError("degenerate neighbour ratios (all equal to one)")
    return float(n_keep / denom)


def id_profile(x, *, threshold: float = 0.99, discard_fraction: float = 0.1,
               seed: int | None = None, max_points: int | None = None) -> IdProfile:
    """Linear ID, TwoNN ID, their ratio and the first component's EVR."""
    data, unit = _data_of(x)
    basis = fit_pca(data)
    lin, reached = linear_id(basis, threshold, return_flag=True)
    if not reached:
        warnings.warn(f"{unit}: cumulative EVR never reaches {threshold}", stacklevel=2)
    nonlin = twonn_id(data, discard_fraction, seed, max_points=max_points)
    return IdProfile(unit, lin, nonlin, lin / nonlin, float(basis.evr[0]), reached)
