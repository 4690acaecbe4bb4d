"""Domain types, the RDT1 tensor format and trace manifests.

Every residual unit of a model run is stored as one RDT1 file: the magic
``b"RDT1"``, a little-endian u32 header length, a compact JSON header and a
row-major float32 little-endian payload. A manifest JSON ties the files of
each split together.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"RDT1"
_LEN = struct.Struct("<I")


class ResidualLensError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(ResidualLensError, ValueError):
    """Invalid input: shapes, invariants, malformed files."""


class TrainingError(ResidualLensError, RuntimeError):
    """Optimization diverged or could not proceed."""


class UnitKind(str, enum.Enum):
    HEAD = "head"
    MLP = "mlp"
    EMBED = "embed"
    OUTPUT = "output"


@dataclass(frozen=True)
class UnitId:
    layer: int
    kind: UnitKind
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", UnitKind(self.kind))
        if self.layer < 0 or self.index < 0:
            raise ValidationError(f"negative layer/index in {self!r}")
        if self.kind is UnitKind.EMBED and (self.layer != 0 or self.index != 0):
            raise ValidationError("embed unit must have layer=0 and index=0")
        if self.kind in (UnitKind.MLP, UnitKind.OUTPUT) and self.index != 0:
            raise ValidationError(f"{self.kind.value} unit must have index=0")

    @classmethod
    def head(cls, layer: int, index: int) -> "UnitId":
        return cls(layer, UnitKind.HEAD, index)

    @classmethod
    def mlp(cls, layer: int) -> "UnitId":
        return cls(layer, UnitKind.MLP, 0)

    @classmethod
    def embed(cls) -> "UnitId":
        return cls(0, UnitKind.EMBED, 0)

    @classmethod
    def output(cls, layer: int = 0) -> "UnitId":
        return cls(layer, UnitKind.OUTPUT, 0)

    @property
    def is_head(self) -> bool:
        return self.kind is UnitKind.HEAD

    @property
    def name(self) -> str:
        """Stable short name, also used for file names (``L3.head5``)."""
        if self.kind is UnitKind.HEAD:
            return f"L{self.layer}.head{self.index}"
        if self.kind is UnitKind.MLP:
            return f"L{self.layer}.mlp"
        return self.kind.value

    def to_json(self) -> dict:
        return {"layer": self.layer, "kind": self.kind.value, "index": self.index}

    @classmethod
    def from_json(cls, obj: Mapping) -> "UnitId":
        try:
            return cls(int(obj["layer"]), UnitKind(obj["kind"]), int(obj.get("index", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed unit id {obj!r}") from exc

    @classmethod
    def parse(cls, text: str) -> "UnitId":
        """Inverse of :attr:`name`."""
        if text in ("embed", "output"):
            return cls(0, UnitKind(text), 0)
        try:
            layer_part, rest = text.split(".", 1)
            layer = int(layer_part.lstrip("L"))
            if rest == "mlp":
                return cls.mlp(layer)
            if rest.startswith("head"):
                return cls.head(layer, int(rest[4:]))
        except ValueError:
            pass
        raise ValidationError(f"cannot parse unit name {text!r}")

    def __str__(self) -> str:
        return self.name


def sort_units(units: Iterable[UnitId]) -> list[UnitId]:
    """Canonical order: embed, then per layer heads followed by the mlp, then output."""
    def key(u: UnitId):
        if u.kind is UnitKind.EMBED:
            return (0, 0, 0, 0)
        if u.kind is UnitKind.OUTPUT:
            return (2, 0, 0, 0)
        return (1, u.layer, 0 if u.is_head else 1, u.index)
    return sorted(units, key=key)


def as_matrix(data, *, name: str = "data") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class UnitTensor:
    """One unit's output-space contributions, shape ``n_samples x d_out``."""

    unit: UnitId | None
    data: np.ndarray
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        data = as_matrix(self.data, name=f"tensor {self.unit}")
        if data.shape[0] < 1:
            raise ValidationError("a unit tensor needs at least one sample")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        ids = tuple(str(s) for s in self.sample_ids) or tuple(str(i) for i in range(data.shape[0]))
        if len(ids) != data.shape[0]:
            raise ValidationError(f"{len(ids)} sample ids for {data.shape[0]} rows")
        object.__setattr__(self, "sample_ids", ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def d_out(self) -> int:
        return self.data.shape[1]

    def with_data(self, data, unit: UnitId | None = None) -> "UnitTensor":
        return UnitTensor(unit if unit is not None else self.unit, data, self.sample_ids)


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Zero-shot task: one encoding per class (text encodings or prototypes)."""

    class_names: tuple[str, ...]
    encodings: np.ndarray

    def __post_init__(self):
        enc = as_matrix(self.encodings, name="class encodings")
        names = tuple(self.class_names)
        if enc.shape[0] < 2:
            raise ValidationError("a task needs at least two classes")
        if len(names) != enc.shape[0]:
            raise ValidationError(f"{len(names)} class names for {enc.shape[0]} encodings")
        if np.any(np.linalg.norm(enc, axis=1) == 0):
            raise ValidationError("class encodings must be nonzero")
        enc.setflags(write=False)
        object.__setattr__(self, "encodings", enc)
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.encodings.shape[0]

    @property
    def normalized(self) -> np.ndarray:
        return self.encodings / np.linalg.norm(self.encodings, axis=1, keepdims=True)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tensor_name = path.with_suffix(".rdt").name
        write_tensor(path.parent / tensor_name, self.encodings)
        path.write_text(json.dumps({"class_names": list(self.class_names), "encodings": tensor_name},
                                   indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TaskSpec":
        path = Path(path)
        try:
            meta = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read task file {path}: {exc}") from exc
        enc = read_tensor(path.parent / meta["encodings"]).data
        return cls(tuple(meta["class_names"]), enc)


# --------------------------------------------------------------------------
# RDT1 format


def encode_tensor(data) -> bytes:
    arr = as_matrix(data, name="tensor payload")
    n, d = arr.shape
    header = json.dumps({"dtype": "f32", "shape": [n, d], "order": "row-major"},
                        separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return MAGIC + _LEN.pack(len(header)) + header + payload


def decode_tensor(blob: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ValidationError(f"{source}: unrecognized format (bad magic)")
    (hlen,) = _LEN.unpack_from(blob, 4)
    if 8 + hlen > len(blob):
        raise ValidationError(f"{source}: header length exceeds file size")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        n, d = (int(v) for v in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"{source}: malformed header") from exc
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise ValidationError(f"{source}: unsupported dtype/order {header!r}")
    payload = blob[8 + hlen:]
    if len(payload) != n * d * 4:
        raise ValidationError(
            f"{source}: payload length mismatch (expected {n * d * 4} bytes, got {len(payload)})")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{source}: non-finite data")
    return arr


def write_tensor(path: str | Path, t: UnitTensor | np.ndarray) -> None:
    """Write a matrix (or a UnitTensor's data) as an RDT1 file."""
    data = t.data if isinstance(t, UnitTensor) else t
    blob = encode_tensor(data)
    Path(path).write_bytes(blob)


def read_tensor(path: str | Path, unit: UnitId | None = None) -> UnitTensor:
    path = Path(path)
    return UnitTensor(unit, decode_tensor(path.read_bytes(), source=str(path)))


def write_vector(path: str | Path, vec) -> None:
    write_tensor(path, np.asarray(vec, dtype=np.float64).reshape(1, -1))


def read_vector(path: str | Path) -> np.ndarray:
    return read_tensor(path).data[0]


# --------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class UnitEntry:
    unit: UnitId
    path: str
    n_samples: int


@dataclass(frozen=True)
class TraceManifest:
    model_name: str
    n_layers: int
    heads_per_layer: int
    d_model: int
    d_head: int
    d_out: int
    splits: Mapping[str, tuple[UnitEntry, ...]]
    labels: Mapping[str, tuple[int, ...]] | None = None

    def __post_init__(self):
        if self.d_head * self.heads_per_layer != self.d_model:
            raise ValidationError(
                f"d_head * heads_per_layer = {self.d_head * self.heads_per_layer} != d_model = {self.d_model}")
        for split, entries in self.splits.items():
            self._check_split(split, entries)
        if self.labels:
            for split, lab in self.labels.items():
                if split not in self.splits:
                    raise ValidationError(f"labels given for unknown split {split!r}")
                n = self.n_samples(split)
                if len(lab) != n:
                    raise ValidationError(f"split {split!r}: {len(lab)} labels for {n} samples")

    @property
    def units_per_split(self) -> int:
        return self.n_layers * self.heads_per_layer + self.n_layers + 2

    def expected_units(self) -> list[UnitId]:
        units = [UnitId.embed()]
        for layer in range(self.n_layers):
            units += [UnitId.head(layer, h) for h in range(self.heads_per_layer)]
            units.append(UnitId.mlp(layer))
        units.append(UnitId.output())
        return units

    def _check_split(self, split: str, entries: Sequence[UnitEntry]) -> None:
        seen: dict[UnitId, UnitEntry] = {}
        outputs = 0
        for e in entries:
            u = e.unit
            if u.kind is UnitKind.OUTPUT:
                outputs += 1
                continue
            if u in seen:
                raise ValidationError(f"split {split!r}: duplicate unit {u}")
            if u.layer >= self.n_layers and u.kind is not UnitKind.EMBED:
                raise ValidationError(f"split {split!r}: unit {u} beyond n_layers={self.n_layers}")
            if u.is_head and u.index >= self.heads_per_layer:
                raise ValidationError(f"split {split!r}: head index {u.index} >= {self.heads_per_layer}")
            seen[u] = e
        if outputs != 1:
            raise ValidationError(f"split {split!r}: expected exactly one output unit, found {outputs}")
        for u in self.expected_units():
            if u.kind is not UnitKind.OUTPUT and u not in seen:
                raise ValidationError(f"split {split!r}: missing unit {u}")
        counts = {e.n_samples for e in entries}
        if len(counts) != 1:
            raise ValidationError(f"split {split!r}: inconsistent sample count {sorted(counts)}")

    def n_samples(self, split: str) -> int:
        return self.entries(split)[0].n_samples

    def entries(self, split: str) -> tuple[UnitEntry, ...]:
        try:
            return self.splits[split]
        except KeyError:
            raise ValidationError(f"unknown split {split!r}; have {sorted(self.splits)}") from None

    def entry(self, split: str, unit: UnitId) -> UnitEntry:
        for e in self.entries(split):
            if e.unit == unit or (unit.kind is UnitKind.OUTPUT and e.unit.kind is UnitKind.OUTPUT):
                return e
        raise ValidationError(f"split {split!r}: missing unit {unit}")

    def head_units(self) -> list[UnitId]:
        return [UnitId.head(l, h) for l in range(self.n_layers) for h in range(self.heads_per_layer)]

    def mlp_units(self) -> list[UnitId]:
        return [UnitId.mlp(l) for l in range(self.n_layers)]

    def to_json(self) -> dict:
        return {
            "model_name": self.model_name,
            "n_layers": self.n_layers,
            "heads_per_layer": self.heads_per_layer,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "d_out": self.d_out,
            "splits": {
                split: [{"unit": e.unit.to_json(), "path": e.path, "n_samples": e.n_samples}
                        for e in entries]
                for split, entries in self.splits.items()
            },
            "labels": None if self.labels is None else {k: list(v) for k, v in self.labels.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TraceManifest":
        try:
            splits = {
                split: tuple(UnitEntry(UnitId.from_json(e["unit"]), str(e["path"]), int(e["n_samples"]))
                             for e in entries)
                for split, entries in obj["splits"].items()
            }
            labels = obj.get("labels")
            return cls(
                model_name=str(obj["model_name"]),
                n_layers=int(obj["n_layers"]),
                heads_per_layer=int(obj["heads_per_layer"]),
                d_model=int(obj["d_model"]),
                d_head=int(obj["d_head"]),
                d_out=int(obj["d_out"]),
                splits=splits,
                labels=None if labels is None else {k: tuple(int(c) for c in v) for k, v in labels.items()},
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"malformed manifest: {exc!r}") from exc


class Trace:
    """A manifest bound to its directory; unit tensors are read on first access."""

    def __init__(self, manifest: TraceManifest, root: str | Path):
        self.manifest = manifest
        self.root = Path(root)
        self._cache: dict[tuple[str, UnitId], UnitTensor] = {}

    def __repr__(self) -> str:
        return f"Trace({self.manifest.model_name!r}, root={str(self.root)!r}, splits={list(self.splits)})"

    @property
    def splits(self) -> list[str]:
        return list(self.manifest.splits)

    def unit(self, split: str, unit: UnitId) -> UnitTensor:
        key = (split, unit)
        if key not in self._cache:
            entry = self.manifest.entry(split, unit)
            t = read_tensor(self.root / entry.path, entry.unit)
            if t.n_samples != entry.n_samples:
                raise ValidationError(
                    f"{entry.path}: inconsistent sample count ({t.n_samples} rows, manifest says {entry.n_samples})")
            if t.d_out != self.manifest.d_out:
                raise ValidationError(f"{entry.path}: dimension mismatch (d_out {t.d_out} != {self.manifest.d_out})")
            self._cache[key] = t
        return self._cache[key]

    def output(self, split: str) -> UnitTensor:
        return self.unit(split, UnitId.output())

    def heads(self, split: str) -> dict[UnitId, UnitTensor]:
        return {u: self.unit(split, u) for u in self.manifest.head_units()}

    def units(self, split: str, *, include_output: bool = False) -> dict[UnitId, UnitTensor]:
        out = {}
        for u in self.manifest.expected_units():
            if u.kind is UnitKind.OUTPUT and not include_output:
                continue
            out[u] = self.unit(split, u)
        return out

    def labels(self, split: str) -> np.ndarray:
        if not self.manifest.labels or split not in self.manifest.labels:
            raise ValidationError(f"no labels for split {split!r}")
        return np.asarray(self.manifest.labels[split], dtype=np.int64)

    def task(self, path: str | Path | None = None) -> TaskSpec:
        return TaskSpec.load(Path(path) if path else self.root / "task.json")

    @cached_property
    def head_units(self) -> list[UnitId]:
        return self.manifest.head_units()


def load_manifest(manifest_path: str | Path) -> TraceManifest:
    path = Path(manifest_path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    return TraceManifest.from_json(obj)


def load_trace(manifest_path: str | Path) -> Trace:
    """Load and validate a manifest; accepts the manifest file or its directory."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = load_manifest(path)
    return Trace(manifest, path.parent)


def save_manifest(manifest: TraceManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
