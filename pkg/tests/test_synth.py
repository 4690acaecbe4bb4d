import numpy as np
import pytest

from residual_lens.align import score_supervised
from residual_lens.core import UnitId, ValidationError
from residual_lens.decompose import RawHeadTensor, distribute_heads, layernorm_project
from residual_lens.synth import (Planted, SynthConfig, gen_trace, oracle_exhaustive_pursuit, oracle_finite_diff,
                                 oracle_pca)


def _s_score(t, unit, split="train"):
    return score_supervised(t.units[split][unit], t.task, t.labels[split]).value


def test_deterministic_per_seed():
    a, b = gen_trace(SynthConfig(seed=11)), gen_trace(SynthConfig(seed=11))
    for split in a.units:
        for u in a.units[split]:
            np.testing.assert_array_equal(a.units[split][u], b.units[split][u])
    assert not np.array_equal(a.units["train"][UnitId.mlp(0)], gen_trace(SynthConfig(seed=12)).units["train"][UnitId.mlp(0)])


def test_written_files_are_reproducible(tmp_path):
    cfg = SynthConfig(seed=4, samples=(("train", 16),))
    gen_trace(cfg).write(tmp_path / "a")
    gen_trace(cfg).write(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unplanted_heads_near_chance():
    t = gen_trace(SynthConfig(seed=0, samples=(("train", 1000),)))
    for u in t.manifest.head_units():
        assert _s_score(t, u) == pytest.approx(0.5, abs=0.1)


def test_clean_planted_head_is_perfect():
    t = gen_trace(SynthConfig(planted=(Planted(UnitId.head(1, 1), 0, 1.0),), noise=0.0, seed=5))
    assert _s_score(t, UnitId.head(1, 1)) == 1.0


def test_stored_output_is_exact_sum(small_synth):
    for units in small_synth.units.values():
        parts = sum(x for u, x in units.items() if u != UnitId.output())
        y = units[UnitId.output()]
        assert np.linalg.norm(parts - y) / np.linalg.norm(y) <= 1e-6


def test_stored_output_matches_monolithic_path(small_synth):
    m, spec = small_synth.manifest, small_synth.projection
    for split, raw in small_synth.raw.items():
        stream = raw[UnitId.embed()] + sum(raw[UnitId.mlp(l)] for l in range(m.n_layers))
        for layer in range(m.n_layers):
            heads = [RawHeadTensor(UnitId.head(layer, h), raw[UnitId.head(layer, h)]) for h in range(m.heads_per_layer)]
            stream = stream + sum(distribute_heads(heads, spec, layer))
        np.testing.assert_allclose(small_synth.units[split][UnitId.output()],
                                   layernorm_project(stream, spec), atol=1e-10)


def test_head_rank_bound(small_synth):
    d_head = small_synth.manifest.d_head
    for u in small_synth.manifest.head_units():
        raw = small_synth.raw["train"][u]
        assert np.linalg.matrix_rank(raw - raw.mean(axis=0), tol=1e-8) <= d_head


def test_config_validation_and_json():
    with pytest.raises(ValidationError):
        SynthConfig(planted=(Planted(UnitId.mlp(0), 0, 1.0),))
    with pytest.raises(ValidationError):
        SynthConfig(planted=(Planted(UnitId.head(0, 0), 0, 1.5),))
    with pytest.raises(ValidationError):
        SynthConfig(d_model=8, heads_per_layer=4, n_classes=3, planted=(Planted(UnitId.head(0, 0), 0, 1.0),))
    cfg = SynthConfig(planted=(Planted(UnitId.head(0, 1), 2, 0.5),), seed=3)
    assert SynthConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValidationError):
        SynthConfig.from_json({"layers": 3})


def test_strength_monotonicity():
    strengths = [0.0, 0.25, 0.5, 0.75, 1.0]
    rhos = []
    for seed in range(10):
        scores = [_s_score(gen_trace(SynthConfig(planted=(Planted(UnitId.head(0, 0), 0, s),), seed=seed,
                                                 samples=(("train", 400),))), UnitId.head(0, 0)) for s in strengths]
        ranks = np.argsort(np.argsort(scores))
        rhos.append(np.corrcoef(ranks, np.arange(len(strengths)))[0, 1])
    assert np.mean(rhos) >= 0.9


def test_oracles():
    evr, _ = oracle_pca(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0], [2.0, 1.0]]))
    np.testing.assert_allclose(evr, [0.8, 0.2], atol=1e-12)
    assert oracle_finite_diff(lambda x: x ** 2, 3.0, h=1e-4) == pytest.approx(6.0, abs=1e-6)
    support, err = oracle_exhaustive_pursuit(np.array([0.0, 2.0, 1.0]), np.eye(3), 2)
    assert support == (1, 2) and err == pytest.approx(0.0)
    with pytest.raises(ValidationError):
        oracle_pca(np.zeros((3, 17)))
    with pytest.raises(ValidationError):
        oracle_exhaustive_pursuit(np.zeros(3), np.eye(3), 4)
