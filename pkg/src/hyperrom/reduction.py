"""POD basis extraction and Galerkin projection of snapshot data."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive
from .dataset import SnapshotSet, read_hrsnap, write_hrsnap
from .errors import FormatError, InputError


@dataclass(frozen=True, eq=False)
class PodBasis:
    V: np.ndarray
    sigma_normalized: np.ndarray
    cumulative_energy: float
    rank_deficient: bool = False

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.V.shape[1]

    def reduce(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.V

    def expand(self, x_r: np.ndarray) -> np.ndarray:
        return np.asarray(x_r) @ self.V.T

    def save(self, path) -> Path:
        return archive.save_arrays(path, "pod-basis", {"V": self.V, "sigma": self.sigma_normalized},
                                   {"cumulative_energy": self.cumulative_energy,
                                    "rank_deficient": self.rank_deficient})

    @classmethod
    def load(cls, path) -> "PodBasis":
        arrays, meta = archive.load_arrays(path, "pod-basis")
        return cls(arrays["V"], arrays["sigma"], meta["cumulative_energy"], meta["rank_deficient"])


def normalized_singular_values(snapshots: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(np.asarray(snapshots, dtype=float), compute_uv=False)
    if s.sum() == 0:
        raise InputError("snapshot matrix is identically zero")
    return s / s.sum()


def rank_for_energy(snapshots: np.ndarray, threshold: float) -> int:
    """Smallest r whose retained normalized singular values sum to ``threshold``."""
    if not 0 < threshold <= 1:
        raise InputError("energy threshold must lie in (0, 1]")
    cum = np.cumsum(normalized_singular_values(snapshots))
    return int(min(np.searchsorted(cum, threshold - 1e-12) + 1, len(cum)))


def compute_basis(snapshots: np.ndarray, r: int) -> PodBasis:
    """First ``r`` left singular vectors of the n x m snapshot matrix.

    Each column is sign-fixed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2:
        raise InputError("snapshot matrix must be two-dimensional (n x m)")
    n, m = X.shape
    if not 1 <= r <= min(n, m):
        raise InputError(f"r={r} outside [1, {min(n, m)}]")
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if s.sum() == 0:
        raise InputError("snapshot matrix is identically zero")
    sigma = s / s.sum()
    numerical_rank = int(np.sum(s > s[0] * max(n, m) * np.finfo(float).eps))
    V = U[:, :r].copy()
    pivots = np.argmax(np.abs(V), axis=0)
    V *= np.where(V[pivots, np.arange(r)] < 0, -1.0, 1.0)
    return PodBasis(V, sigma[:r].copy(), float(sigma[:r].sum()), r > numerical_rank)


@dataclass(eq=False)
class ReducedDataset:
    """Reduced samples, possibly drawn from several load cases.

    ``cases``/``labels``/``steps`` identify where each sample came from.
    """

    x: np.ndarray
    e: np.ndarray
    f: np.ndarray
    K: np.ndarray
    has_K: np.ndarray
    loads: np.ndarray
    labels: list[str]
    cases: list[str] = field(default_factory=list)
    steps: np.ndarray | None = None

    def __post_init__(self):
        m = len(self.x)
        if not self.cases:
            self.cases = ["case"] * m
        if self.steps is None:
            self.steps = np.arange(m)
        self.steps = np.asarray(self.steps, dtype=int)
        if not (len(self.e) == len(self.f) == len(self.K) == len(self.has_K) == len(self.loads)
                == len(self.labels) == len(self.cases) == len(self.steps) == m):
            raise InputError("reduced dataset arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def r(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "ReducedDataset":
        idx = np.asarray(indices, dtype=int)
        return ReducedDataset(self.x[idx], self.e[idx], self.f[idx], self.K[idx], self.has_K[idx],
                              self.loads[idx], [self.labels[i] for i in idx],
                              [self.cases[i] for i in idx], self.steps[idx])

    @classmethod
    def concatenate(cls, sets: Sequence["ReducedDataset"]) -> "ReducedDataset":
        if not sets:
            raise InputError("nothing to concatenate")
        cat = lambda attr: np.concatenate([getattr(s, attr) for s in sets])  # noqa: E731
        return cls(cat("x"), cat("e"), cat("f"), cat("K"), cat("has_K"), cat("loads"),
                   [lab for s in sets for lab in s.labels], [c for s in sets for c in s.cases],
                   cat("steps"))

    def save(self, path) -> Path:
        path = Path(path).with_suffix(".hrsnap")
        write_hrsnap(path, self.loads, self.x, self.e, self.f, self.K, self.has_K)
        sidecar = {"format": "hrsnap", "reduced": True, "labels": self.labels,
                   "cases": self.cases, "steps": self.steps.tolist()}
        path.with_suffix(".json").write_text(json.dumps(sidecar))
        return path

    @classmethod
    def load(cls, path) -> "ReducedDataset":
        path = Path(path).with_suffix(".hrsnap")
        loads, x, e, f, K, mask = read_hrsnap(path)
        try:
            meta = json.loads(path.with_suffix(".json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: missing or unreadable sidecar") from exc
        return cls(x, e, f, K, mask, loads, meta["labels"], meta["cases"], meta["steps"])


def project(basis: PodBasis, snapshots: SnapshotSet) -> ReducedDataset:
    """``x_r = V^T x``, ``f_r = V^T f``, ``K_r = V^T K V``; energy is copied."""
    if snapshots.n != basis.n:
        raise InputError(f"snapshots have n={snapshots.n}, basis has n={basis.n}")
    V = basis.V
    K_r = np.einsum("ia,mij,jb->mab", V, snapshots.K, V)
    K_r = 0.5 * (K_r + K_r.transpose(0, 2, 1))
    K_r[~snapshots.has_K] = 0.0
    m = len(snapshots)
    return ReducedDataset(snapshots.x @ V, snapshots.e.copy(), snapshots.f @ V, K_r,
                          snapshots.has_K.copy(), snapshots.load_values.copy(),
                          [snapshots.case_label] * m, [snapshots.name] * m, np.arange(m))


def reconstruction_error(basis: PodBasis, x: np.ndarray) -> np.ndarray:
    """Per-sample ``||V V^T x - x|| / ||x||`` (zero rows give 0)."""
    x = np.atleast_2d(x)
    err = np.linalg.norm(basis.expand(basis.reduce(x)) - x, axis=1)
    ref = np.linalg.norm(x, axis=1)
    return np.divide(err, ref, out=np.zeros_like(err), where=ref > 0)
