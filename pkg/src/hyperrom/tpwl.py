"""Trajectory piecewise-linear (TPWL) hyperreduction.

Stored reduced linearizations ``(x_i, f_i, K_i)`` are blended with sharp,
distance-based weights into an effective affine model around the query.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import archive
from .errors import InputError
from .reduction import ReducedDataset

DEFAULT_BETA = 25.0


@dataclass(frozen=True, eq=False)
class TpwlModel:
    points: np.ndarray
    forces: np.ndarray
    stiffness: np.ndarray
    beta: float = DEFAULT_BETA
    epsilon: float = 1e-12
    source_steps: np.ndarray | None = None

    def __post_init__(self):
        if len(self.points) < 1:
            raise InputError("TPWL model needs at least one linearization point")
        if not (self.beta > 0 and self.epsilon > 0):
            raise InputError("beta and epsilon must be positive")
        N, r = self.points.shape
        if self.forces.shape != (N, r) or self.stiffness.shape != (N, r, r):
            raise InputError("inconsistent TPWL array shapes")

    @property
    def r(self) -> int:
        return self.points.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        """``f_i - K_i x_i``: the constant part of each linearization."""
        return self.forces - np.einsum("nij,nj->ni", self.stiffness, self.points)

    def weights(self, x_r: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(self.points - np.asarray(x_r, dtype=float), axis=1)
        m = d.min() + self.epsilon
        w = np.exp(-self.beta * d / m)
        return w / w.sum()

    def force_and_tangent(self, x_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Blended force and the frozen-weight tangent ``sum_i w_i K_i``."""
        x_r = np.asarray(x_r, dtype=float)
        w = self.weights(x_r)
        K = np.einsum("n,nij->ij", w, self.stiffness)
        K = 0.5 * (K + K.T)
        return w @ self.offsets + K @ x_r, K

    def save(self, path) -> Path:
        path = Path(path).with_suffix(".hrmod")
        steps = np.arange(len(self.points)) if self.source_steps is None else self.source_steps
        archive.save_arrays(path, "tpwl", {"points": self.points, "forces": self.forces,
                                           "stiffness": self.stiffness, "steps": steps},
                            {"beta": self.beta, "epsilon": self.epsilon})
        path.with_suffix(".json").write_text(json.dumps(
            {"beta": self.beta, "epsilon": self.epsilon, "points": len(self.points),
             "source_steps": [int(s) for s in steps]}, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "TpwlModel":
        arrays, meta = archive.load_arrays(Path(path).with_suffix(".hrmod"), "tpwl")
        return cls(arrays["points"], arrays["forces"], arrays["stiffness"], meta["beta"],
                   meta["epsilon"], arrays["steps"].astype(int))


def equidistant_indices(m: int, count: int) -> np.ndarray:
    if count == 1:
        return np.array([0])
    return np.array([round(k * (m - 1) / (count - 1)) for k in range(count)])


def build(data: ReducedDataset, fraction: float = 0.5, beta: float = DEFAULT_BETA,
          epsilon: float | None = None) -> TpwlModel:
    """Keep ``ceil(fraction * M)`` samples, equidistant in load-step order."""
    if len(data) == 0:
        raise InputError("empty dataset")
    if not 0 < fraction <= 1:
        raise InputError("fraction must lie in (0, 1]")
    order = np.argsort(data.steps, kind="stable")
    chosen = order[equidistant_indices(len(data), math.ceil(round(fraction * len(data), 9)))]
    if not np.all(data.has_K[chosen]):
        raise InputError("TPWL needs tangent matrices at every selected sample")
    points = data.x[chosen]
    if epsilon is None:
        epsilon = 1e-12 * (1.0 + float(np.mean(np.linalg.norm(points, axis=1))))
    return TpwlModel(points.copy(), data.f[chosen].copy(), data.K[chosen].copy(), float(beta),
                     float(epsilon), data.steps[chosen].copy())
