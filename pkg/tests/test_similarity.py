import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from residual_lens.core import UnitId, ValidationError
from residual_lens.similarity import (WeightedBasis, normalized_spectral_cosine, spectral_match, spectral_matches,
                                      unit_similarity, write_grid)
from residual_lens.spectra import fit_pca
from residual_lens.synth import Planted, SynthConfig, gen_trace

from conftest import orthonormal_rows

R45 = np.array([[1.0, 1.0], [-1.0, 1.0]]) / np.sqrt(2)


def test_identical_standard_basis():
    e = WeightedBasis.unweighted(np.eye(2))
    assert spectral_matches(e, e) == [(0, 0, 1.0), (1, 1, 1.0)]


def test_rotated_basis_matches():
    pairs = spectral_matches(WeightedBasis.unweighted(np.eye(2)), WeightedBasis.unweighted(R45))
    assert len(pairs) == 2
    assert [s for _, _, s in pairs] == pytest.approx([0.7071, 0.7071], abs=1e-4)
    assert normalized_spectral_cosine(WeightedBasis.unweighted(np.eye(2)),
                                      WeightedBasis.unweighted(R45)) == pytest.approx(0.7071, abs=1e-4)


def test_orthogonal_single_vectors():
    a = WeightedBasis.unweighted(np.array([[1.0, 0.0]]))
    b = WeightedBasis.unweighted(np.array([[0.0, 1.0]]))
    assert spectral_matches(a, b) == [(0, 0, 0.0)]
    assert normalized_spectral_cosine(a, b) == 0.0


def test_identical_weighted_basis(rng):
    v = orthonormal_rows(rng, 3, 5)
    a = WeightedBasis(v, np.array([5.0, 2.0, 0.1]))
    assert normalized_spectral_cosine(a, a) == pytest.approx(1.0, abs=1e-12)


def test_frozen_weighted_instance():
    rng = np.random.default_rng(5)
    a = WeightedBasis(np.linalg.qr(rng.standard_normal((4, 4)))[0][:3], np.array([3.0, 2.0, 1.0]))
    b = WeightedBasis(np.linalg.qr(rng.standard_normal((4, 4)))[0][:2], np.array([2.5, 0.5]))
    m = spectral_match(a, b)
    assert [(i, j) for i, j, _ in m.pairs] == [(0, 1), (2, 0)]
    assert [s for _, _, s in m.pairs] == pytest.approx([1.2957830383924192, 1.5978215741850184], rel=1e-12)
    assert m.score == pytest.approx(0.27188770689728076, rel=1e-12)


def test_validation():
    with pytest.raises(ValidationError):
        WeightedBasis(np.array([[2.0, 0.0]]), np.array([1.0]))
    with pytest.raises(ValidationError):
        WeightedBasis(np.eye(2), np.array([1.0, 2.0]))
    with pytest.raises(ValidationError):
        normalized_spectral_cosine(WeightedBasis(np.eye(2), np.zeros(2)), WeightedBasis(np.eye(2), np.zeros(2)))


def test_same_unit_same_data(rng):
    b = fit_pca(rng.standard_normal((40, 6)))
    assert unit_similarity(b, b) == pytest.approx(1.0, abs=1e-6)


def test_rotated_data_equals_direct_computation(rng):
    x = rng.standard_normal((60, 5)) * [3, 2, 1, 0.5, 0.2]
    q = orthonormal_rows(rng, 5, 5)
    ref, rot = fit_pca(x), fit_pca(x @ q)
    direct = normalized_spectral_cosine(WeightedBasis(ref.components, ref.singular_values),
                                        WeightedBasis(ref.components @ q, ref.singular_values))
    assert unit_similarity(ref, rot) == pytest.approx(direct, abs=1e-6)


def test_planted_unit_more_similar_than_unrelated():
    wins = 0
    for seed in range(20):
        base = dict(n_layers=1, heads_per_layer=2, d_model=16, d_out=8, noise=0.05,
                    samples=(("train", 200), ("val", 200)))
        cfg = SynthConfig(planted=(Planted(UnitId.head(0, 0), 0, 1.0),), seed=seed, **base)
        t = gen_trace(cfg)
        same = unit_similarity(fit_pca(t.units["train"][UnitId.head(0, 0)]), fit_pca(t.units["val"][UnitId.head(0, 0)]))
        other = gen_trace(SynthConfig(seed=seed + 1000, **base))
        unrelated = unit_similarity(fit_pca(t.units["train"][UnitId.head(0, 0)]),
                                    fit_pca(other.units["val"][UnitId.head(0, 1)]))
        wins += same > unrelated
    assert wins == 20


def test_grid_csv(tmp_path):
    write_grid([{"dataset": "val", "layer": 0, "head": 1, "score": 0.5}], tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows == [["dataset", "layer", "head", "score"], ["val", "0", "1", "0.50000000"]]


def _random_weighted(rng, k, d):
    v = rng.standard_normal((k, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return WeightedBasis(v, np.sort(rng.exponential(size=k))[::-1])


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k1=st.integers(1, 8), k2=st.integers(1, 8), d=st.integers(2, 10))
def test_bounded_and_symmetric(seed, k1, k2, d):
    rng = np.random.default_rng(seed)
    a, b = _random_weighted(rng, k1, d), _random_weighted(rng, k2, d)
    s_ab = normalized_spectral_cosine(a, b)
    assert -1e-12 <= s_ab <= 1 + 1e-6
    assert normalized_spectral_cosine(b, a) == pytest.approx(s_ab, abs=1e-6)
    for i, j, s in spectral_matches(a, b):
        assert s <= a.weights[i] * b.weights[j] + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 6))
def test_sign_flip_invariance(seed, k):
    rng = np.random.default_rng(seed)
    a, b = _random_weighted(rng, k, 6), _random_weighted(rng, k, 6)
    flips = rng.choice([-1.0, 1.0], size=(k, 1))
    assert normalized_spectral_cosine(WeightedBasis(a.vectors * flips, a.weights), b) == pytest.approx(
        normalized_spectral_cosine(a, b), abs=1e-12)
