"""Component-level analysis of residual-stream encoders.

Decompose an encoder's output into per-unit contributions, measure their
spectral geometry, interpret them against a text dictionary, compare them
across datasets and realign them to a task with very few parameters.
"""

__version__ = "0.1.0"

from .core import (ResidualLensError, TaskSpec, Trace, TraceManifest, TrainingError, UnitId, UnitKind, UnitTensor,
                   ValidationError, load_trace, read_tensor, write_tensor)
from .spectra import PcaBasis, fit_pca, id_profile, linear_id, twonn_id
from .pursuit import Dictionary, agreement_zscore, omp, somp, textspan
from .similarity import WeightedBasis, normalized_spectral_cosine, spectral_matches, unit_similarity
from .align import optimize_unit_weights, select_topk, zeroshot_eval
from .residual import LambdaSet, RdConfig, Variant, fit_residual, rd_output, rd_param_count
from .training import OptimConfig

__all__ = [
    "Dictionary", "LambdaSet", "OptimConfig", "PcaBasis", "RdConfig", "ResidualLensError", "TaskSpec", "Trace",
    "TraceManifest", "TrainingError", "UnitId", "UnitKind", "UnitTensor", "ValidationError", "Variant",
    "WeightedBasis", "agreement_zscore", "fit_pca", "fit_residual", "id_profile", "linear_id", "load_trace",
    "normalized_spectral_cosine", "omp", "optimize_unit_weights", "rd_output", "rd_param_count", "read_tensor",
    "select_topk", "somp", "spectral_matches", "textspan", "twonn_id", "unit_similarity", "write_tensor",
    "zeroshot_eval",
]
