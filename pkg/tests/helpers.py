"""Shared builders and finite-difference oracles for the test suite."""
from __future__ import annotations

import numpy as np

from hyperrom import refmodel
from hyperrom.reduction import ReducedDataset

TOY_A = np.array([[3.0, 1.0], [1.0, 2.0]])


def central_gradient(fun, x, h):
    """Central-difference gradient of a scalar or vector function (columns = directions)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(len(x)):
        dx = np.zeros_like(x)
        dx[k] = h
        cols.append((np.asarray(fun(x + dx)) - np.asarray(fun(x - dx))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


def small_lattice(bays: int = 3) -> refmodel.TrussGeometry:
    return refmodel.cantilever_lattice(refmodel.Lattice(bays=bays))


def single_bar() -> refmodel.TrussGeometry:
    """Horizontal bar, L0 = 1 m, EA = 1 N; only the axial DOF of the free end is free."""
    return refmodel.TrussGeometry([[0.0, 0.0], [1.0, 0.0]], [[0, 1]], [1.0], (0, 1, 3))


def toy_dataset(m: int = 101, seed: int = 0, A=TOY_A, scale: float = 1.0) -> ReducedDataset:
    """Realizable r=2 data from the quadratic energy ``x^T A x / 2``."""
    rng = np.random.default_rng(seed)
    x = scale * rng.uniform(-1.0, 1.0, size=(m, len(A)))
    e = 0.5 * np.einsum("ni,ij,nj->n", x, A, x)
    f = x @ A
    K = np.broadcast_to(A, (m, *A.shape)).copy()
    return ReducedDataset(x, e, f, K, np.ones(m, bool), np.zeros((m, 1)), ["interpolation"] * m,
                          ["toy"] * m, np.arange(m))
