import numpy as np
import pytest

from residual_lens.core import UnitId
from residual_lens.synth import Planted, SynthConfig, gen_trace


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(n_layers=2, heads_per_layer=2, d_model=16, d_out=8, n_classes=2,
                       samples=(("train", 64), ("val", 32), ("test", 32)),
                       planted=(Planted(UnitId.head(1, 0), 0, 1.0),), seed=3)


@pytest.fixture(scope="session")
def small_synth(small_cfg):
    return gen_trace(small_cfg)


@pytest.fixture(scope="session")
def small_trace(small_synth, tmp_path_factory):
    return small_synth.write(tmp_path_factory.mktemp("trace"))


def orthonormal_rows(rng, k, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q[:k]
