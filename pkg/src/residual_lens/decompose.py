"""Additive decomposition of the residual stream into output-space units.

Raw head outputs are projected through their layer's attention output
weights with the bias split evenly across heads; the final LayerNorm is
frozen into a per-sample affine map so that every unit can be pushed through
it and the final projection independently. The LayerNorm shift (``beta @ P``)
is attributed to the embed unit so it is counted once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import UnitId, UnitKind, UnitTensor, ValidationError, as_matrix, read_tensor, write_tensor


@dataclass(frozen=True, eq=False)
class ProjectionSpec:
    """Projection weights of a pre-norm transformer.

    ``attn_weights[i]`` is ``d_model x d_model`` acting on row vectors
    (``cat(heads) @ W + b``); ``projection`` is ``d_model x d_out``.
    """

    attn_weights: tuple[np.ndarray, ...]
    attn_biases: tuple[np.ndarray, ...]
    ln_gain: np.ndarray
    ln_shift: np.ndarray
    projection: np.ndarray
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.attn_weights) != len(self.attn_biases):
            raise ValidationError("need one bias per attention layer")
        if not self.layernorm_eps > 0:
            raise ValidationError("layernorm_eps must be positive")
        d = self.d_model
        for i, (w, b) in enumerate(zip(self.attn_weights, self.attn_biases)):
            if np.shape(w) != (d, d) or np.shape(b) != (d,):
                raise ValidationError(f"layer {i}: W must be {d}x{d} and b length {d}")
        if np.shape(self.ln_gain) != (d,) or np.shape(self.ln_shift) != (d,):
            raise ValidationError("LayerNorm gain/shift must have length d_model")
        if np.shape(self.projection)[0] != d:
            raise ValidationError("projection must be d_model x d_out")
        for arr in (*self.attn_weights, *self.attn_biases, self.ln_gain, self.ln_shift, self.projection):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("projection spec contains non-finite values")

    @property
    def d_model(self) -> int:
        return int(np.shape(self.projection)[0])

    @property
    def d_out(self) -> int:
        return int(np.shape(self.projection)[1])

    @property
    def n_layers(self) -> int:
        return len(self.attn_weights)

    def save(self, directory: str | Path) -> None:
        """Write every array as an RDT1 file plus an ``index.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"n_layers": self.n_layers, "layernorm_eps": self.layernorm_eps,
                 "attn_weights": [], "attn_biases": []}
        for i, (w, b) in enumerate(zip(self.attn_weights, self.attn_biases)):
            write_tensor(directory / f"W{i}.rdt", w)
            write_tensor(directory / f"b{i}.rdt", np.reshape(b, (1, -1)))
            index["attn_weights"].append(f"W{i}.rdt")
            index["attn_biases"].append(f"b{i}.rdt")
        for name, arr in (("ln_gain", self.ln_gain), ("ln_shift", self.ln_shift)):
            write_tensor(directory / f"{name}.rdt", np.reshape(arr, (1, -1)))
            index[name] = f"{name}.rdt"
        write_tensor(directory / "projection.rdt", self.projection)
        index["projection"] = "projection.rdt"
        (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ProjectionSpec":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        rd = lambda name: read_tensor(directory / name).data  # noqa: E731
        return cls(
            attn_weights=tuple(rd(p) for p in index["attn_weights"]),
            attn_biases=tuple(rd(p)[0] for p in index["attn_biases"]),
            ln_gain=rd(index["ln_gain"])[0],
            ln_shift=rd(index["ln_shift"])[0],
            projection=rd(index["projection"]),
            layernorm_eps=float(index["layernorm_eps"]),
        )


@dataclass(frozen=True, eq=False)
class RawHeadTensor:
    unit: UnitId
    data: np.ndarray

    def __post_init__(self):
        if self.unit.kind is not UnitKind.HEAD:
            raise ValidationError(f"raw head tensor needs a head unit, got {self.unit}")
        object.__setattr__(self, "data", as_matrix(self.data, name=f"raw {self.unit}"))


def distribute_heads(raw: Sequence[RawHeadTensor], spec: ProjectionSpec, layer: int) -> list[np.ndarray]:
    """Per-head ``d_model``-space contributions of one attention layer.

    Head ``h`` contributes ``pad_h(H0_h) @ W + b / N_h`` where ``pad_h``
    places the raw head output in column block ``h``; only that block of
    rows of ``W`` is touched so the padding is never materialized.
    """
    n_heads = len(raw)
    if n_heads == 0:
        raise ValidationError("no raw head tensors given")
    if not 0 <= layer < spec.n_layers:
        raise ValidationError(f"layer {layer} out of range")
    d_model = spec.d_model
    if d_model % n_heads:
        raise ValidationError(f"d_model={d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    w = np.asarray(spec.attn_weights[layer], dtype=np.float64)
    b = np.asarray(spec.attn_biases[layer], dtype=np.float64)
    ordered = sorted(raw, key=lambda r: r.unit.index)
    if [r.unit.index for r in ordered] != list(range(n_heads)):
        raise ValidationError("raw heads must cover indices 0..N_h-1 exactly once")
    n = ordered[0].data.shape[0]
    out = []
    for h, r in enumerate(ordered):
        if r.data.shape != (n, d_head):
            raise ValidationError(f"head {r.unit}: shape {r.data.shape}, expected {(n, d_head)}")
        out.append(r.data @ w[h * d_head:(h + 1) * d_head] + b / n_heads)
    return out


@dataclass(frozen=True, eq=False)
class LayerNormAffine:
    """Final LayerNorm with statistics frozen from the full residual sum.

    ``scale[r] = gain / sqrt(var_r + eps)``; a unit's row ``u`` maps to
    ``((u - mean(u)) * scale[r]) @ P`` and the shift ``beta @ P`` is added
    once for the whole sum.
    """

    scale: np.ndarray
    shift: np.ndarray
    projection: np.ndarray

    def apply(self, unit_rows, *, include_shift: bool = False) -> np.ndarray:
        u = as_matrix(unit_rows)
        if u.shape != self.scale.shape:
            raise ValidationError(f"unit shape {u.shape} != stream shape {self.scale.shape}")
        centered = u - u.mean(axis=1, keepdims=True)
        out = (centered * self.scale) @ self.projection
        if include_shift:
            out = out + self.shift
        return out


def layernorm_affine(sum_stream, spec: ProjectionSpec) -> LayerNormAffine:
    """Freeze LayerNorm on ``sum_stream`` (the full residual sum) into an affine map."""
    y = as_matrix(sum_stream, name="sum_stream")
    if y.shape[1] != spec.d_model:
        raise ValidationError(f"stream width {y.shape[1]} != d_model {spec.d_model}")
    var = y.var(axis=1)
    meansq = np.mean(y * y, axis=1)
    degenerate = var <= 1e-12 * np.maximum(meansq, np.finfo(float).tiny)
    if np.any(degenerate):
        raise ValidationError(f"degenerate row(s) with zero variance: {np.flatnonzero(degenerate)[:5].tolist()}")
    scale = spec.ln_gain[None, :] / np.sqrt(var + spec.layernorm_eps)[:, None]
    return LayerNormAffine(scale=scale, shift=np.asarray(spec.ln_shift) @ spec.projection,
                           projection=np.asarray(spec.projection, dtype=np.float64))


def layernorm_project(sum_stream, spec: ProjectionSpec) -> np.ndarray:
    """Monolithic ``LayerNorm(Y) @ P``; the reference path for the distributed form."""
    y = as_matrix(sum_stream)
    mu = y.mean(axis=1, keepdims=True)
    var = y.var(axis=1, keepdims=True)
    normed = (y - mu) / np.sqrt(var + spec.layernorm_eps) * spec.ln_gain + spec.ln_shift
    return normed @ spec.projection


def project_units(units: Mapping[UnitId, np.ndarray], spec: ProjectionSpec) -> dict[UnitId, np.ndarray]:
    """Map every ``d_model``-space unit to output space through the frozen LayerNorm and ``P``."""
    stream = sum(np.asarray(u, dtype=np.float64) for u in units.values())
    ln = layernorm_affine(stream, spec)
    return {u: ln.apply(x, include_shift=(u.kind is UnitKind.EMBED)) for u, x in units.items()}


def assemble_output(units: Sequence[UnitTensor] | Mapping[UnitId, UnitTensor]) -> UnitTensor:
    """Sum all non-output units of a split into the output unit."""
    items = list(units.values()) if isinstance(units, Mapping) else list(units)
    items = [t for t in items if t.unit is None or t.unit.kind is not UnitKind.OUTPUT]
    if not any(t.unit is not None and t.unit.kind is UnitKind.EMBED for t in items):
        raise ValidationError("missing embed unit")
    shape = items[0].shape
    total = np.zeros(shape)
    for t in items:
        if t.shape != shape:
            raise ValidationError(f"unit {t.unit} has shape {t.shape}, expected {shape}")
        total += t.data
    return UnitTensor(UnitId.output(), total, items[0].sample_ids)
