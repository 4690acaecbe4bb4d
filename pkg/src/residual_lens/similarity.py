"""Normalized spectral cosine similarity between PCA bases.

A discrete analogue of principal angles: components of the two bases are
paired greedily by absolute cosine, without replacement, and each match is
weighted by the product of the two components' weights (singular values).
The score only needs the two bases, so units fitted on datasets of
different sizes can be compared directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels
from .core import ValidationError, as_matrix
from .spectra import PcaBasis


@dataclass(frozen=True, eq=False)
class WeightedBasis:
    vectors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        v = as_matrix(self.vectors, name="basis vectors")
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if v.shape[0] < 1:
            raise ValidationError("a basis needs at least one vector")
        if w.shape[0] != v.shape[0]:
            raise ValidationError(f"{w.shape[0]} weights for {v.shape[0]} vectors")
        if np.any(np.abs(np.linalg.norm(v, axis=1) - 1.0) > 1e-6):
            raise ValidationError("basis rows must be l2-normalized")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite and nonnegative")
        if np.any(np.diff(w) > 1e-12 * max(1.0, float(w.max()))):
            raise ValidationError("weights must be sorted in descending order")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "weights", w)

    @classmethod
    def unweighted(cls, vectors) -> "WeightedBasis":
        v = as_matrix(vectors)
        return cls(v, np.ones(v.shape[0]))

    @classmethod
    def from_pca(cls, basis: PcaBasis, weighted: bool = True) -> "WeightedBasis":
        w = basis.singular_values if weighted else np.ones(basis.n_components)
        return cls(basis.components, w)

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class SpectralMatch:
    pairs: tuple[tuple[int, int, float], ...]
    score: float


def spectral_matches(a: WeightedBasis, b: WeightedBasis) -> list[tuple[int, int, float]]:
    """Greedy matches ``(i, j, s_n)``: pick the largest remaining ``|u_i . v_j|``,
    then weight it by ``w_a[i] * w_b[j]``."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValidationError("bases live in spaces of different dimension")
    cos = np.abs(a.vectors @ b.vectors.T)
    rows, cols = kernels.greedy_match(cos)
    return [(int(i), int(j), float(cos[i, j] * a.weights[i] * b.weights[j])) for i, j in zip(rows, cols)]


def spectral_match(a: WeightedBasis, b: WeightedBasis) -> SpectralMatch:
    pairs = spectral_matches(a, b)
    return SpectralMatch(tuple(pairs), _normalize(pairs, a, b))


def _normalize(pairs, a: WeightedBasis, b: WeightedBasis) -> float:
    m = len(pairs)
    denom = float(np.sum((a.weights[:m] * b.weights[:m]) ** 2))
    if denom <= 0.0:
        raise ValidationError("all weights are zero")
    num = float(sum(s * s for _, _, s in pairs))
    return float(np.sqrt(num / denom))


def normalized_spectral_cosine(a: WeightedBasis, b: WeightedBasis) -> float:
    """``sqrt(sum s_n^2 / sum (w_a[n] w_b[n])^2)`` over the ``min(k_a, k_b)`` matches."""
    return _normalize(spectral_matches(a, b), a, b)


def unit_similarity(reference: PcaBasis, other: PcaBasis, weighted: bool = True) -> float:
    if reference.d_out != other.d_out:
        raise ValidationError(f"d_out mismatch: {reference.d_out} vs {other.d_out}")
    return normalized_spectral_cosine(WeightedBasis.from_pca(reference, weighted),
                                      WeightedBasis.from_pca(other, weighted))


GRID_COLUMNS = ("dataset", "layer", "head", "score")


def write_grid(rows: Iterable[dict], path: str | Path) -> None:
    """CSV with columns dataset, layer, head, score."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.8f}" if k == "score" else row[k]) for k in GRID_COLUMNS})
