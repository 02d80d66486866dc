"""Newton-Raphson continuation on hyperreduced models (TPWL or PANN)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import pann
from .errors import InputError, NumericError
from .reduction import PodBasis
from .refmodel import LoadCase, NewtonSettings
from .tpwl import TpwlModel

Backend = Union[TpwlModel, pann.PannModel]


@dataclass(frozen=True, eq=False)
class HyperModel:
    backend: Backend
    basis: PodBasis

    def __post_init__(self):
        if self.backend.r != self.basis.r:
            raise InputError(f"backend has r={self.backend.r}, basis has r={self.basis.r}")

    @property
    def r(self) -> int:
        return self.basis.r

    def reduced_input(self, load: LoadCase) -> np.ndarray:
        if load.input_matrix.shape[0] != self.basis.n:
            raise InputError("load input matrix does not match the basis dimension")
        return self.basis.V.T @ load.input_matrix

    def force_and_tangent(self, x_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(self.backend, pann.PannModel):
            return pann.force_and_tangent(self.backend, x_r)
        return self.backend.force_and_tangent(x_r)


@dataclass(eq=False)
class SolveTrace:
    """Per recorded load step: convergence flag, iterations, residual norm and state.

    Steps after a divergence are not attempted; their state and residual are NaN.
    """

    loads: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    x_r: np.ndarray
    diverged_at: int | None = None
    name: str = ""
    label: str = ""

    def __len__(self) -> int:
        return len(self.loads)

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())

    def write_csv(self, path) -> None:
        r = self.x_r.shape[1]
        p = self.loads.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"load_{j}" for j in range(p)], "converged", "iterations",
                        "residual", *[f"x_r_{k}" for k in range(r)]])
            for k in range(len(self)):
                w.writerow([k, *(repr(float(v)) for v in self.loads[k]), int(self.converged[k]),
                            int(self.iterations[k]), repr(float(self.residual[k])),
                            *(repr(float(v)) for v in self.x_r[k])])

    @classmethod
    def read_csv(cls, path, name: str = "", label: str = "") -> "SolveTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array([[float(v) for v in row] for row in rows[1:]])
        p = sum(h.startswith("load_") for h in head)
        conv = body[:, 1 + p].astype(bool)
        div = None if conv.all() else int(np.argmin(conv))
        return cls(body[:, 1:1 + p], conv, body[:, 2 + p].astype(int), body[:, 3 + p],
                   body[:, 4 + p:], div, name, label)


class _StepFailure(Exception):
    def __init__(self, iterations, residual):
        self.iterations, self.residual = iterations, residual


def _newton_step(model: HyperModel, target, x, settings: NewtonSettings):
    tol = settings.tolerance * (1.0 + np.linalg.norm(target))
    r = model.r
    res_norm = np.inf
    for it in range(settings.max_iterations + 1):
        try:
            f, K = model.force_and_tangent(x)
        except NumericError:
            raise _StepFailure(it, np.nan) from None
        residual = target - f
        res_norm = float(np.linalg.norm(residual))
        if not (np.isfinite(res_norm) and np.all(np.isfinite(K))):
            raise _StepFailure(it, np.nan)
        if res_norm <= tol:
            return x, it, res_norm
        if it == settings.max_iterations:
            break
        if np.linalg.matrix_rank(K) < r:
            K = K + 1e-8 * np.trace(K) / r * np.eye(r)
        try:
            dx = np.linalg.solve(K, residual)
        except np.linalg.LinAlgError:
            raise _StepFailure(it, res_norm) from None
        x = x + dx
        if not np.all(np.isfinite(x)):
            raise _StepFailure(it + 1, np.nan)
    raise _StepFailure(settings.max_iterations, res_norm)


def solve_reduced(model: HyperModel, load: LoadCase,
                  settings: NewtonSettings = NewtonSettings()) -> SolveTrace:
    """Solve ``f_r(x_r) = B_r u`` step by step, each from the previous converged state."""
    B_r = model.reduced_input(load)
    m = len(load.magnitudes)
    trace = SolveTrace(load.magnitudes.copy(), np.zeros(m, bool), np.zeros(m, int),
                       np.full(m, np.nan), np.full((m, model.r), np.nan), None,
                       load.name, load.label)
    x = np.zeros(model.r)
    try:
        for u in load.lead_in:
            x, _, _ = _newton_step(model, B_r @ u, x, settings)
    except _StepFailure:
        trace.diverged_at = 0
        return trace
    for k, u in enumerate(load.magnitudes):
        try:
            x, its, res = _newton_step(model, B_r @ u, x, settings)
        except _StepFailure as fail:
            trace.iterations[k] = fail.iterations
            trace.residual[k] = fail.residual
            trace.diverged_at = k
            break
        trace.converged[k] = True
        trace.iterations[k] = its
        trace.residual[k] = res
        trace.x_r[k] = x
    return trace
