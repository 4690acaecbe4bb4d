"""Greedy sparse recovery over a dictionary of unit-norm atoms.

``omp`` handles a single vector, ``somp`` a matrix of signals sharing one
support, and ``textspan`` is the deflation-based variant that picks atoms by
the variance of their projections. With the variance criterion and the same
dictionary, ``textspan`` and ``somp`` select identical supports and leave
identical residuals.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ValidationError, as_matrix, read_tensor

TIE_TOL = 1e-9


class Criterion(str, enum.Enum):
    L1 = "l1"
    VARIANCE = "variance"


@dataclass(frozen=True, eq=False)
class Dictionary:
    atoms: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        atoms = as_matrix(self.atoms, name="dictionary atoms")
        labels = tuple(str(l) for l in self.labels)
        if atoms.shape[0] < 1:
            raise ValidationError("dictionary needs at least one atom")
        if len(labels) != atoms.shape[0]:
            raise ValidationError(f"{len(labels)} labels for {atoms.shape[0]} atoms")
        norms = np.linalg.norm(atoms, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("dictionary atoms must be l2-normalized")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_vectors(cls, vectors, labels: Sequence[str] | None = None) -> "Dictionary":
        v = as_matrix(vectors)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValidationError("cannot normalize a zero atom")
        if labels is None:
            labels = [f"atom_{i}" for i in range(v.shape[0])]
        return cls(v / norms, tuple(labels))

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


def load_dictionary(path: str | Path) -> Dictionary:
    """Read a JSON-lines dictionary: ``{"label": ..., "vector": [...]}`` or ``{"label": ..., "path": "x.rdt"}``.

    Vectors are normalized on load.
    """
    path = Path(path)
    labels, vectors = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            labels.append(str(rec["label"]))
            if "vector" in rec:
                vectors.append(np.asarray(rec["vector"], dtype=np.float64))
            else:
                vectors.append(read_tensor(path.parent / rec["path"]).data.ravel())
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad dictionary record ({exc})") from exc
    if not vectors:
        raise ValidationError(f"{path}: empty dictionary")
    return Dictionary.from_vectors(np.vstack(vectors), labels)


def save_dictionary(dictionary: Dictionary, path: str | Path) -> None:
    with open(path, "w") as fh:
        for label, atom in zip(dictionary.labels, dictionary.atoms):
            fh.write(json.dumps({"label": label, "vector": [float(v) for v in atom]}) + "\n")


@dataclass(frozen=True, eq=False)
class PursuitResult:
    support: tuple[int, ...]
    reconstruction: np.ndarray
    residual: np.ndarray
    per_step_criterion: tuple[float, ...]
    coefficients: np.ndarray | None = None
    residual_norms: tuple[float, ...] = ()
    ties: tuple[int, ...] = ()
    stopped: str | None = None

    def labels(self, dictionary: Dictionary) -> list[str]:
        return [dictionary.labels[i] for i in self.support]

    @property
    def tie_free(self) -> bool:
        return not self.ties


@dataclass
class _State:
    support: list[int] = field(default_factory=list)
    crit: list[float] = field(default_factory=list)
    norms: list[float] = field(default_factory=list)
    ties: list[int] = field(default_factory=list)
    stopped: str | None = None


def _pick(scores: np.ndarray, excluded: Sequence[int], step: int, state: _State) -> int:
    s = np.array(scores, dtype=np.float64)
    s[list(excluded)] = -np.inf
    best = int(np.argmax(s))  # lowest index on exact ties
    top = s[best]
    if np.isfinite(top):
        rest = np.delete(s, best)
        if rest.size and np.any(top - rest[np.isfinite(rest)] <= TIE_TOL * max(1.0, abs(top))):
            state.ties.append(step)
    state.support.append(best)
    state.crit.append(float(top))
    return best


def _criterion(proj: np.ndarray, criterion: Criterion) -> np.ndarray:
    """Per-atom score of ``proj = D R^T`` (atoms x samples)."""
    if criterion is Criterion.L1:
        return np.abs(proj).sum(axis=1)
    return proj.var(axis=1)


def _lstsq_refit(signal: np.ndarray, atoms: np.ndarray) -> np.ndarray | None:
    """Coefficients W minimizing ||signal - W atoms||_F, or None when atoms are rank deficient."""
    gram = atoms @ atoms.T
    if np.linalg.matrix_rank(gram, tol=1e-10 * max(1.0, np.abs(gram).max())) < atoms.shape[0]:
        return None
    # solve via QR of atoms^T for accuracy
    q, r = np.linalg.qr(atoms.T)
    return np.linalg.solve(r, q.T @ signal.T).T


def _check_iters(n_iters: int, limit: int) -> None:
    if n_iters < 0 or n_iters > limit:
        raise ValidationError(f"n_iters must be in [0, {limit}], got {n_iters}")


def _greedy_refit(signal: np.ndarray, dictionary: Dictionary, n_iters: int, score) -> PursuitResult:
    atoms = dictionary.atoms
    state = _State()
    scale = max(np.linalg.norm(signal), np.finfo(float).tiny)
    residual = signal.copy()
    recon = np.zeros_like(signal)
    coefs = np.zeros((signal.shape[0], 0))
    for step in range(n_iters):
        if np.linalg.norm(residual) <= 1e-12 * scale:
            state.stopped = "exact recovery"
            break
        _pick(score(atoms @ residual.T), state.support, step, state)
        w = _lstsq_refit(signal, atoms[state.support])
        if w is None:
            state.support.pop()
            state.crit.pop()
            state.stopped = f"rank-deficient support at step {step}"
            break
        coefs = w
        recon = w @ atoms[state.support]
        residual = signal - recon
        state.norms.append(float(np.linalg.norm(residual)))
    return PursuitResult(tuple(state.support), recon, residual, tuple(state.crit), coefs,
                         tuple(state.norms), tuple(state.ties), state.stopped)


def omp(signal, dictionary: Dictionary, n_iters: int) -> PursuitResult:
    """Orthogonal matching pursuit on one vector; selects by ``|<atom, residual>|``."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dictionary.dim:
        raise ValidationError(f"signal must be a vector of length {dictionary.dim}")
    _check_iters(n_iters, dictionary.size)
    res = _greedy_refit(x[None, :], dictionary, n_iters, lambda p: np.abs(p[:, 0]))
    return PursuitResult(res.support, res.reconstruction[0], res.residual[0], res.per_step_criterion,
                         None if res.coefficients is None else res.coefficients[0],
                         res.residual_norms, res.ties, res.stopped)


def somp(signal, dictionary: Dictionary, n_iters: int, criterion: Criterion | str = Criterion.L1) -> PursuitResult:
    """Simultaneous OMP: one shared support for all rows of ``signal``."""
    x = as_matrix(signal, name="signal")
    if x.shape[1] != dictionary.dim:
        raise ValidationError(f"signal width {x.shape[1]} != dictionary dim {dictionary.dim}")
    _check_iters(n_iters, min(dictionary.size, dictionary.dim))
    crit = Criterion(criterion)
    return _greedy_refit(x, dictionary, n_iters, lambda p: _criterion(p, crit))


def project_dictionary(dictionary: Dictionary, signal, rank: int) -> Dictionary:
    """Restrict atoms to the span of the signal's top ``rank`` principal components.

    Atoms are re-normalized; an atom with no component in that span is kept
    as is (it can never be useful but must not be divided by zero).
    """
    x = as_matrix(signal)
    if rank >= dictionary.dim:
        return dictionary
    from .spectra import fit_pca

    comps = fit_pca(x, max_components=rank).components
    proj = dictionary.atoms @ comps.T @ comps
    norms = np.linalg.norm(proj, axis=1, keepdims=True)
    ok = norms[:, 0] > 1e-12
    atoms = dictionary.atoms.copy()
    atoms[ok] = proj[ok] / norms[ok]
    return Dictionary(atoms, dictionary.labels)


def textspan(signal, dictionary: Dictionary, n_iters: int, project_dict_rank: int | str | None = None,
             criterion: Criterion | str = Criterion.VARIANCE) -> PursuitResult:
    """Deflation pursuit: after each pick the chosen (deflated) atom is projected out
    of the residual and of every remaining working atom.

    ``project_dict_rank`` pre-filters the dictionary onto the signal's top
    principal components; ``"auto"`` uses the signal's linear ID at 0.99.
    """
    x = as_matrix(signal, name="signal")
    if x.shape[1] != dictionary.dim:
        raise ValidationError(f"signal width {x.shape[1]} != dictionary dim {dictionary.dim}")
    _check_iters(n_iters, min(dictionary.size, dictionary.dim))
    if project_dict_rank == "auto":
        from .spectra import fit_pca, linear_id

        project_dict_rank = linear_id(fit_pca(x))
    if project_dict_rank is not None:
        dictionary = project_dictionary(dictionary, x, int(project_dict_rank))
    crit = Criterion(criterion)
    work = dictionary.atoms.copy()
    state = _State()
    residual = x.copy()
    recon = np.zeros_like(x)
    scale = max(np.linalg.norm(x), np.finfo(float).tiny)
    for step in range(n_iters):
        if np.linalg.norm(residual) <= 1e-12 * scale:
            state.stopped = "exact recovery"
            break
        p = _pick(_criterion(work @ residual.T, crit), state.support, step, state)
        atom = work[p]
        nn = float(atom @ atom)
        if nn <= 1e-20:
            state.support.pop()
            state.crit.pop()
            state.stopped = f"rank-deficient support at step {step}"
            break
        step_proj = np.outer(residual @ atom, atom) / nn
        residual = residual - step_proj
        recon = recon + step_proj
        work = work - np.outer(work @ atom, atom) / nn
        state.norms.append(float(np.linalg.norm(residual)))
    return PursuitResult(tuple(state.support), recon, residual, tuple(state.crit), None,
                         tuple(state.norms), tuple(state.ties), state.stopped)


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def set_similarity(set_a, set_b, pairing: str = "mean") -> float:
    """Similarity of two sets of encodings.

    ``"mean"`` averages all cross-pair cosines; ``"matched"`` greedily pairs
    members without replacement and averages the matched cosines.
    """
    cos = _cosines(as_matrix(set_a), as_matrix(set_b))
    if pairing == "mean":
        return float(cos.mean())
    if pairing == "matched":
        from .kernels import greedy_match

        rows, cols = greedy_match(cos)
        return float(cos[rows, cols].mean())
    raise ValidationError(f"unknown pairing {pairing!r}")


def agreement_zscore(set_a, set_b, dictionary: Dictionary, pairing: str = "mean") -> float:
    """Absolute Z-score of ``sim(set_a, set_b)`` against the cosines between
    each member of ``set_a`` and every dictionary atom."""
    a = as_matrix(set_a, name="set_a")
    b = as_matrix(set_b, name="set_b")
    sim = set_similarity(a, b, pairing)
    pop = _cosines(a, dictionary.atoms).ravel()
    sigma = float(pop.std())
    if sigma <= 1e-12:
        raise ValidationError("background similarities have zero spread")
    return abs(sim - float(pop.mean())) / sigma
