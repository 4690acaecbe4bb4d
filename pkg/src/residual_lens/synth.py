"""Synthetic traces with planted head specialization, and brute-force oracles.

A random pre-norm projection stack (attention output weights, final
LayerNorm, final projection) is drawn, raw per-head outputs are sampled as
low-rank Gaussians and pushed through the exact decomposition, so the stored
output equals the sum of the stored units. A planted head carries the class
code of each sample along one of its principal directions; class encodings
are mutually orthogonal unit vectors inside that head's output-space image.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import (TaskSpec, Trace, TraceManifest, UnitEntry, UnitId, UnitKind, ValidationError, save_manifest,
                   write_tensor)
from .decompose import ProjectionSpec, RawHeadTensor, distribute_heads, layernorm_affine, layernorm_project
from .pursuit import Dictionary, save_dictionary

DECAY = 0.7


@dataclass(frozen=True)
class Planted:
    unit: UnitId
    component: int = 0
    strength: float = 1.0

    def to_json(self) -> dict:
        return {"unit": self.unit.name, "component": self.component, "strength": self.strength}


@dataclass(frozen=True)
class SynthConfig:
    n_layers: int = 2
    heads_per_layer: int = 4
    d_model: int = 32
    d_out: int = 16
    n_classes: int = 2
    samples: tuple[tuple[str, int], ...] = (("train", 512), ("val", 256), ("test", 256))
    planted: tuple[Planted, ...] = ()
    noise: float = 0.05
    seed: int = 0
    distractor: float = 0.0
    distractor_heads: bool = False
    head_scale: float = 1.0
    mlp_scale: float = 0.5
    embed_scale: float = 0.5
    bias_scale: float = 0.01
    dictionary_size: int = 32
    model_name: str = "synthetic"

    def __post_init__(self):
        if self.d_model % self.heads_per_layer:
            raise ValidationError("d_model must be divisible by heads_per_layer")
        if self.n_classes < 2:
            raise ValidationError("need at least two classes")
        object.__setattr__(self, "samples", tuple((str(s), int(n)) for s, n in dict(self.samples).items()))
        object.__setattr__(self, "planted", tuple(self.planted))
        for p in self.planted:
            if p.unit.kind is not UnitKind.HEAD:
                raise ValidationError(f"planted unit {p.unit} is not a head")
            if p.unit.layer >= self.n_layers or p.unit.index >= self.heads_per_layer:
                raise ValidationError(f"planted unit {p.unit} does not exist")
            if not 0.0 <= p.strength <= 1.0:
                raise ValidationError("planted strength must be in [0, 1]")
            if self.d_head < self.n_classes:
                raise ValidationError(
                    f"over-constrained planting: {self.n_classes} class directions do not fit in d_head={self.d_head}")
            if p.component < 0 or p.component > self.d_head - self.n_classes:
                raise ValidationError(f"planted component {p.component} out of range for d_head={self.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads_per_layer

    def to_json(self) -> dict:
        d = asdict(self)
        d["samples"] = dict(self.samples)
        d["planted"] = [p.to_json() for p in self.planted]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        if "samples" in obj:
            obj["samples"] = tuple(dict(obj["samples"]).items())
        if "planted" in obj:
            obj["planted"] = tuple(
                Planted(UnitId.parse(p["unit"]) if isinstance(p["unit"], str) else UnitId.from_json(p["unit"]),
                        int(p.get("component", 0)), float(p.get("strength", 1.0)))
                for p in obj["planted"])
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class SynthTrace:
    config: SynthConfig
    manifest: TraceManifest
    units: dict[str, dict[UnitId, np.ndarray]]
    raw: dict[str, dict[UnitId, np.ndarray]]
    labels: dict[str, np.ndarray]
    task: TaskSpec
    projection: ProjectionSpec
    dictionary: Dictionary
    planted_directions: dict[UnitId, np.ndarray] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> Trace:
        """Write manifest, unit tensors, raw tensors, task, projection and dictionary."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for split, units in self.units.items():
            (out / split).mkdir(exist_ok=True)
            for u, x in units.items():
                write_tensor(out / split / f"{u.name}.rdt", x)
            (out / "raw" / split).mkdir(parents=True, exist_ok=True)
            for u, x in self.raw[split].items():
                write_tensor(out / "raw" / split / f"{u.name}.rdt", x)
        save_manifest(self.manifest, out / "manifest.json")
        self.task.save(out / "task.json")
        self.projection.save(out / "projection")
        save_dictionary(self.dictionary, out / "dictionary.jsonl")
        (out / "synth_config.json").write_text(json.dumps(self.config.to_json(), indent=2) + "\n")
        return Trace(self.manifest, out)


def _orthonormal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def random_projection(rng: np.random.Generator, n_layers: int, d_model: int, d_out: int,
                      bias_scale: float = 0.01) -> ProjectionSpec:
    weights = tuple(_orthonormal(rng, d_model) for _ in range(n_layers))
    biases = tuple(bias_scale * rng.normal(size=d_model) for _ in range(n_layers))
    gain = 1.0 + 0.1 * rng.normal(size=d_model)
    shift = bias_scale * rng.normal(size=d_model)
    proj = _orthonormal(rng, d_model)[:, :d_out] if d_out <= d_model else rng.normal(size=(d_model, d_out)) / np.sqrt(d_model)
    return ProjectionSpec(weights, biases, gain, shift, proj)


def _head_map(spec: ProjectionSpec, layer: int, head: int, d_head: int) -> np.ndarray:
    """Linear part of head-space -> output-space (up to the per-sample LayerNorm scale)."""
    d = spec.d_model
    w = spec.attn_weights[layer][head * d_head:(head + 1) * d_head]
    center = np.eye(d) - 1.0 / d
    return w @ center @ np.diag(spec.ln_gain) @ spec.projection


def _stream_map(spec: ProjectionSpec) -> np.ndarray:
    d = spec.d_model
    return (np.eye(d) - 1.0 / d) @ np.diag(spec.ln_gain) @ spec.projection


def _row_basis(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    return vt[s > tol * s[0]]


def gen_trace(cfg: SynthConfig) -> SynthTrace:
    rng = np.random.default_rng(cfg.seed)
    L, H, dh, C = cfg.n_layers, cfg.heads_per_layer, cfg.d_head, cfg.n_classes
    spec = random_projection(rng, L, cfg.d_model, cfg.d_out, cfg.bias_scale)
    planted = {p.unit: p for p in cfg.planted}

    # class encodings: orthonormal, inside the first planted head's output image
    if cfg.planted:
        first = cfg.planted[0].unit
        img = _head_map(spec, first.layer, first.index, dh) @ np.eye(cfg.d_out)
        g = rng.normal(size=(C, dh)) @ img
        q, _ = np.linalg.qr(g.T)
        classes = q.T[:C]
    else:
        classes = _orthonormal(rng, cfg.d_out)[:C] if C <= cfg.d_out else rng.normal(size=(C, cfg.d_out))
    task = TaskSpec(tuple(f"class_{c}" for c in range(C)), classes)

    # per-head sampling plans, drawn once and shared across splits
    plans: dict[UnitId, dict] = {}
    for layer in range(L):
        for h in range(H):
            u = UnitId.head(layer, h)
            a = _head_map(spec, layer, h, dh)
            pinv = np.linalg.pinv(a)
            if u in planted:
                p = planted[u]
                # class directions (exact for the first planted head, projected otherwise)
                target = classes @ np.linalg.pinv(_row_basis(a)) @ _row_basis(a)
                v_class = target @ pinv
                img = _row_basis(a)
                comp = img - (img @ classes.T) @ np.linalg.pinv(classes.T)
                comp = _row_basis(comp) if np.linalg.norm(comp) > 1e-9 else np.zeros((0, cfg.d_out))
                comp = comp[: max(0, dh - C)]
                noise_dirs = comp @ pinv
                rank = noise_dirs.shape[0]
                amps = np.array([DECAY ** (j if j < p.component else j + 1) for j in range(rank)])
                plans[u] = {"noise_dirs": noise_dirs, "amps": amps * cfg.head_scale, "class_dirs": v_class,
                            "class_amp": np.sqrt(C) * DECAY ** p.component * cfg.head_scale, "strength": p.strength}
            else:
                rank = int(rng.integers(2, dh + 1)) if dh >= 2 else dh
                dirs = _orthonormal(rng, dh)[:rank]
                plans[u] = {"noise_dirs": dirs, "amps": cfg.head_scale * DECAY ** np.arange(rank)}
                if cfg.distractor_heads and cfg.distractor > 0:
                    plans[u]["distract_dirs"] = classes @ np.linalg.pinv(_row_basis(a)) @ _row_basis(a) @ pinv
    stream_pinv = np.linalg.pinv(_stream_map(spec))
    distract_stream = classes @ stream_pinv

    units: dict[str, dict[UnitId, np.ndarray]] = {}
    raws: dict[str, dict[UnitId, np.ndarray]] = {}
    labels: dict[str, np.ndarray] = {}
    for split, n in cfg.samples:
        lab = rng.permutation(np.arange(n) % C)
        labels[split] = lab
        raw: dict[UnitId, np.ndarray] = {UnitId.embed(): cfg.embed_scale * rng.normal(size=(n, cfg.d_model))}
        dmodel: dict[UnitId, np.ndarray] = {UnitId.embed(): raw[UnitId.embed()]}
        for layer in range(L):
            raw_heads = []
            for h in range(H):
                u = UnitId.head(layer, h)
                plan = plans[u]
                z = rng.normal(size=(n, plan["noise_dirs"].shape[0])) * plan["amps"]
                x = z @ plan["noise_dirs"] + cfg.noise * rng.normal(size=(n, dh))
                if "class_dirs" in plan:
                    s = plan["strength"]
                    onehot = np.eye(C)[lab] - 1.0 / C
                    decoy = 0.5 * rng.normal(size=(n, C))
                    code = s * onehot + np.sqrt(max(0.0, 1.0 - s * s)) * decoy
                    x = x + plan["class_amp"] * code @ plan["class_dirs"]
                if "distract_dirs" in plan:
                    x = x + cfg.distractor * rng.normal(size=(n, C)) @ plan["distract_dirs"]
                raw[u] = x
                raw_heads.append(RawHeadTensor(u, x))
            for r, hx in zip(raw_heads, distribute_heads(raw_heads, spec, layer)):
                dmodel[r.unit] = hx
            m = UnitId.mlp(layer)
            mx = cfg.mlp_scale * rng.normal(size=(n, cfg.d_model))
            if cfg.distractor > 0:
                mx = mx + cfg.distractor * rng.normal(size=(n, C)) @ distract_stream
            raw[m] = mx
            dmodel[m] = mx
        stream = sum(dmodel.values())
        ln = layernorm_affine(stream, spec)
        out = {u: ln.apply(x, include_shift=(u.kind is UnitKind.EMBED)) for u, x in dmodel.items()}
        out[UnitId.output()] = layernorm_project(stream, spec)
        units[split] = out
        raws[split] = raw

    manifest = TraceManifest(
        model_name=cfg.model_name, n_layers=L, heads_per_layer=H, d_model=cfg.d_model, d_head=dh,
        d_out=cfg.d_out,
        splits={split: tuple(UnitEntry(u, f"{split}/{u.name}.rdt", int(n))
                             for u in [UnitId.embed()] + [x for l in range(L) for x in
                                                          [UnitId.head(l, h) for h in range(H)] + [UnitId.mlp(l)]]
                             + [UnitId.output()])
                for split, n in cfg.samples},
        labels={split: tuple(int(c) for c in labels[split]) for split, _ in cfg.samples},
    )
    dictionary = _dictionary(rng, cfg, task, units[cfg.samples[0][0]], planted)
    directions = {u: plans[u]["class_dirs"] for u in planted}
    return SynthTrace(cfg, manifest, units, raws, labels, task, spec, dictionary, directions)


def _dictionary(rng, cfg: SynthConfig, task: TaskSpec, units, planted) -> Dictionary:
    """Class codes, noisy copies of the leading PCs of a few heads and random filler atoms."""
    from .spectra import fit_pca

    vecs, labels = list(task.normalized), list(task.class_names)
    heads = [u for u in units if u.is_head]
    for u in heads[: max(0, cfg.dictionary_size // 4)]:
        basis = fit_pca(units[u])
        for k in range(min(2, basis.n_components)):
            vecs.append(basis.components[k] + 0.05 * rng.normal(size=cfg.d_out))
            labels.append(f"{u.name}.pc{k}")
    while len(vecs) < cfg.dictionary_size:
        vecs.append(rng.normal(size=cfg.d_out))
        labels.append(f"random_{len(vecs):03d}")
    return Dictionary.from_vectors(np.vstack(vecs), labels)


def write_synthetic(cfg: SynthConfig, out_dir: str | Path) -> Trace:
    return gen_trace(cfg).write(out_dir)


def planted_component(basis, task: TaskSpec) -> int:
    """Index of the basis component carrying the most variance inside the span of the class encodings."""
    q, _ = np.linalg.qr(task.encodings.T)
    energy = np.sum((basis.components @ q) ** 2, axis=1) * basis.singular_values ** 2
    return int(np.argmax(energy))


# --------------------------------------------------------------------------
# brute-force oracles, independent of the library code paths


def oracle_pca(x) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors (rows) of the explicit covariance; returns (evr, vectors)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] > 16:
        raise ValidationError("oracle_pca is limited to d <= 16")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    return vals / vals.sum(), vecs[:, order].T


def oracle_exhaustive_pursuit(signal, atoms, k: int) -> tuple[tuple[int, ...], float]:
    """Support of size ``k`` with the smallest least-squares residual, by enumeration."""
    x = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    d = np.asarray(atoms, dtype=np.float64)
    if d.shape[0] > 24 or k > 3 or d.shape[1] > 16:
        raise ValidationError("oracle_exhaustive_pursuit is limited to k <= 24 atoms, support <= 3, d <= 16")
    best, best_err = None, np.inf
    for subset in itertools.combinations(range(d.shape[0]), k):
        sub = d[list(subset)]
        coef, *_ = np.linalg.lstsq(sub.T, x.T, rcond=None)
        err = float(np.linalg.norm(x.T - sub.T @ coef))
        if err < best_err - 1e-12:
            best, best_err = subset, err
    return tuple(best), best_err


def oracle_finite_diff(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function at ``point`` (scalar or vector)."""
    p = np.asarray(point, dtype=np.float64)
    flat = p.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up.reshape(p.shape)) - f(dn.reshape(p.shape))) / (2 * h)
    return grad.reshape(p.shape)
