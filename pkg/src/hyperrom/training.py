"""Sobolev losses, loss balancing, gradient aggregation and the multi-initialization trainer."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.optimize import lsq_linear

from .dataset import SplitPlan, split, split_indices
from .errors import InputError, NumericError
from .pann import DTYPE, PannModel, Standardizer, build_model
from .reduction import ReducedDataset

log = logging.getLogger(__name__)

LOSS_NAMES = ("E", "F", "K")
KINDS = ("plain_sum", "hessian_only", "static_weights", "dynamic_pinn", "dynamic_same_scale")

# static weight sets (energy, force, stiffness) tuned for the Ansys beam data
PRESETS = {
    "force_only": (0.0, 1.0, 0.0),
    "intuitive": (1.0, 1.0, 1e-9),
    "maximum": (1.0, 9e2, 9e-8),
    "standard_deviation": (3e-1, 2e-2, 6e-12),
}


class SobolevLosses(NamedTuple):
    E: torch.Tensor
    F: torch.Tensor
    K: torch.Tensor


class Batch(NamedTuple):
    x: torch.Tensor
    e: torch.Tensor
    f: torch.Tensor
    K: torch.Tensor | None

    @classmethod
    def from_dataset(cls, data: ReducedDataset) -> "Batch":
        if len(data) == 0:
            raise InputError("empty batch")
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)  # noqa: E731
        return cls(t(data.x), t(data.e), t(data.f), t(data.K) if np.all(data.has_K) else None)


def losses(model: PannModel, batch: Batch | ReducedDataset, need=LOSS_NAMES) -> SobolevLosses:
    """Half mean squared errors of energy, force and stiffness (no component-wise scaling)."""
    if isinstance(batch, ReducedDataset):
        batch = Batch.from_dataset(batch)
    want_K = "K" in need
    if want_K and batch.K is None:
        raise InputError("stiffness targets missing")
    e, f, K = model(batch.x, hessian=want_K)
    nan = torch.tensor(math.nan, dtype=DTYPE)
    return SobolevLosses(
        0.5 * torch.mean((e - batch.e) ** 2),
        0.5 * torch.mean((f - batch.f) ** 2),
        0.5 * torch.mean((K - batch.K) ** 2) if want_K else nan,
    )


@dataclass(frozen=True)
class BalancingStrategy:
    kind: str = "static_weights"
    weights: tuple[float, float, float] = PRESETS["force_only"]
    ramp: tuple[int, int] | None = None
    aggregation: str = "none"
    ema: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown balancing kind {self.kind!r}")
        if self.aggregation not in ("none", "nonconflicting"):
            raise InputError(f"unknown aggregation {self.aggregation!r}")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise InputError("static weights must be three nonnegative numbers")
        if self.ramp is not None and not self.ramp[0] < self.ramp[1]:
            raise InputError("ramp start must precede ramp end")

    @classmethod
    def preset(cls, name: str, **kwargs) -> "BalancingStrategy":
        return cls("static_weights", PRESETS[name], **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _one_digit(v: float) -> float:
    return float(f"{v:.0e}") if v > 0 and math.isfinite(v) else 0.0


def dataset_weights(data: ReducedDataset, scheme: str) -> tuple[float, float, float]:
    """Static (E, F, K) weights computed from a dataset, rounded to one significant digit.

    ``maximum``: squared ratio of the largest energy magnitude to each quantity's
    largest magnitude.  ``standard_deviation``: inverse variance of each quantity's
    entries.  The shipped presets were obtained this way on other data.
    """
    K = data.K[data.has_K]
    if K.size == 0:
        raise InputError("stiffness targets missing")
    parts = (np.asarray(data.e, float).ravel(), np.asarray(data.f, float).ravel(), K.ravel())
    if scheme == "maximum":
        peaks = [np.abs(p).max() for p in parts]
        if min(peaks) == 0:
            raise InputError("a target quantity is identically zero")
        return tuple(_one_digit((peaks[0] / p) ** 2) for p in peaks)
    if scheme == "standard_deviation":
        stds = [p.std() for p in parts]
        if min(stds) == 0:
            raise InputError("a target quantity is constant")
        return tuple(_one_digit(1.0 / s ** 2) for s in stds)
    raise InputError(f"unknown weighting scheme {scheme!r}")


@dataclass
class EmaState:
    weights: np.ndarray | None = None


def ramp_factor(epoch: int, ramp: tuple[int, int] | None) -> float:
    if ramp is None:
        return 1.0
    start, end = ramp
    return float(min(max((epoch - start) / (end - start), 0.0), 1.0))


def same_scale_weights(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    total = v.sum()
    if total == 0 or not np.isfinite(total):
        return np.full(len(v), 1.0 / len(v))
    return (1.0 - v / total) / (len(v) - 1)


def pinn_weights(grad_norms: Sequence[float]) -> np.ndarray:
    """``sum_j |grad L_j| / |grad L_i|``; a loss with zero gradient gets weight 1."""
    g = np.asarray(grad_norms, dtype=float)
    safe = np.where(g > 0, g, 1.0)
    return np.where(g > 0, g.sum() / safe, 1.0)


def combine(values: SobolevLosses | Sequence, strategy: BalancingStrategy, epoch: int = 0,
            grad_norms: Sequence[float] | None = None, ema_state: EmaState | None = None):
    """Weighted total loss and the weights used, ordered (E, F, K)."""
    if (grad_norms is not None) != (strategy.kind == "dynamic_pinn"):
        raise InputError("grad_norms must be given exactly for dynamic_pinn")
    plain = [_num(v) for v in values]
    if strategy.kind == "plain_sum":
        w = np.ones(3)
    elif strategy.kind == "hessian_only":
        w = np.array([0.0, 0.0, 1.0])
    elif strategy.kind == "static_weights":
        w = np.array(strategy.weights, dtype=float)
    elif strategy.kind == "dynamic_same_scale":
        w = same_scale_weights(plain)
    else:
        w = pinn_weights(grad_norms)
        state = ema_state if ema_state is not None else EmaState()
        if state.weights is not None:
            w = strategy.ema * state.weights + (1.0 - strategy.ema) * w
        state.weights = w.copy()
    w = w.copy()
    w[2] *= ramp_factor(epoch, strategy.ramp)
    total = sum(wi * v for wi, v in zip(w, values) if wi != 0.0)
    if isinstance(total, int):
        total = 0.0 * values[1]
    return total, tuple(float(x) for x in w)


def aggregate_nonconflicting(grads: Sequence):
    """Non-conflicting linear combination of ``grads``.

    Each gradient is projected onto the cone ``{d : g_j . d >= 0 for all j}`` and
    the projections are summed.  For two gradients this removes from each the
    component along its peer when they conflict and leaves them alone otherwise.
    """
    if len(grads) < 2:
        raise InputError("need at least two gradients")
    is_torch = isinstance(grads[0], torch.Tensor)
    G = np.stack([g.detach().numpy() if is_torch else np.asarray(g, dtype=float) for g in grads])
    if len({g.shape for g in G}) != 1:
        raise InputError("gradients must have equal length")
    norms = np.linalg.norm(G, axis=1)
    live = np.flatnonzero(norms > 0)
    coeff = np.zeros(len(G))
    if live.size:
        # the cone depends only on directions; unit normals keep the solve well scaled
        U = G[live] / norms[live, None]
        for row, i in enumerate(live):
            # projection of u_i: d = u_i + U^T w with w >= 0 minimizing |d|
            w = lsq_linear(U.T, -U[row], bounds=(0.0, np.inf), method="bvls", tol=1e-14).x
            coeff[i] += 1.0
            coeff[live] += norms[i] * w / norms[live]
        # an empty cone interior leaves only round-off; return an exact zero then
        if np.linalg.norm(coeff @ G) <= 1e-10 * float(coeff @ norms):
            coeff[:] = 0.0
    if is_torch:
        return torch.as_tensor(coeff, dtype=grads[0].dtype) @ torch.stack(list(grads))
    return coeff @ G


# --- training loop -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100_000
    learning_rate: float = 1e-3
    depth: int = 2
    width: int = 75
    n_inits: int = 10
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed_base: int = 0
    standardize: bool = False
    physical_init: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


HISTORY_COLUMNS = ("epoch", "train_E", "train_F", "train_K", "val_E", "val_F", "val_K")


@dataclass
class TrainedRun:
    init_index: int
    seed: int
    model: PannModel
    history: np.ndarray
    best_epoch: int
    best_val: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    failed_epoch: int | None = None
    train_indices: np.ndarray | None = None

    @property
    def failed(self) -> bool:
        return self.failed_epoch is not None

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_history(directory / "history.csv", self.history)
        self.model.save(directory / "checkpoint")
        manifest = {"init_index": self.init_index, "seed": self.seed, "best_epoch": self.best_epoch,
                    "best_val": self.best_val, "test": self.test, "failed_epoch": self.failed_epoch,
                    "train_indices": [int(i) for i in self.train_indices]
                    if self.train_indices is not None else None}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def read(cls, directory) -> "TrainedRun":
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        return cls(meta["init_index"], meta["seed"], PannModel.load(directory / "checkpoint"),
                   read_history(directory / "history.csv"), meta["best_epoch"], meta["best_val"],
                   meta["test"], meta["failed_epoch"],
                   None if meta["train_indices"] is None else np.array(meta["train_indices"]))


def write_history(path, history: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def read_history(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in row] for row in rows]).reshape(-1, len(HISTORY_COLUMNS))


def _flat_grad(loss, params):
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)])


def _assign_grad(params, flat):
    offset = 0
    for p in params:
        p.grad = flat[offset:offset + p.numel()].view_as(p).clone()
        offset += p.numel()


def _num(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _as_floats(values) -> list[float]:
    return [_num(v) for v in values]


def train_model(model: PannModel, train: ReducedDataset, val: ReducedDataset,
                config: TrainConfig, strategy: BalancingStrategy):
    """Full-batch Adam on ``model`` in place.

    Returns ``(best_state, best_epoch, history, failed_epoch)``; the checkpoint
    is the state with the lowest validation force loss seen at any epoch,
    including the initialization (epoch 0).
    """
    train_b, val_b = Batch.from_dataset(train), Batch.from_dataset(val)
    need = LOSS_NAMES if train_b.K is not None else ("E", "F")
    params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas,
                           eps=config.adam_eps)
    ema = EmaState()
    history = []
    best_state, best_epoch, best_val = None, 0, math.inf
    failed_epoch = None
    per_loss = strategy.kind == "dynamic_pinn" or strategy.aggregation == "nonconflicting"

    for epoch in range(config.epochs + 1):
        try:
            tr = losses(model, train_b, need)
            with torch.no_grad():
                va = losses(model, val_b, "K" if val_b.K is not None else ("E", "F"))
        except NumericError:
            failed_epoch = epoch
            break
        history.append([epoch, *_as_floats(tr), *_as_floats(va)])
        if not all(math.isfinite(_num(tr[LOSS_NAMES.index(k)])) for k in need) \
                or not math.isfinite(_num(va.F)):
            failed_epoch = epoch
            break
        if _num(va.F) < best_val:
            best_val, best_epoch = _num(va.F), epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if epoch == config.epochs:
            break

        opt.zero_grad(set_to_none=True)
        active = [i for i in range(3) if LOSS_NAMES[i] in need]
        if per_loss:
            raw = {i: _flat_grad(tr[i], params) for i in active}
            norms = [float(raw[i].norm()) if i in raw else 0.0 for i in range(3)]
            _, w = combine(tr, strategy, epoch,
                           norms if strategy.kind == "dynamic_pinn" else None, ema)
            parts = [w[i] * raw[i] for i in active if w[i] != 0.0]
            if not parts:
                continue
            direction = (aggregate_nonconflicting(parts)
                         if strategy.aggregation == "nonconflicting" and len(parts) > 1
                         else torch.stack(parts).sum(0))
            _assign_grad(params, direction)
        else:
            total, _ = combine(tr, strategy, epoch)
            if not total.requires_grad:
                continue
            total.backward()
        opt.step()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.refresh_offsets()
    return best_state, best_epoch, np.array(history, dtype=float).reshape(-1, 7), failed_epoch


def _evaluate(model, data):
    if data is None or len(data) == 0:
        return {}
    b = Batch.from_dataset(data)
    with torch.no_grad():
        vals = losses(model, b, LOSS_NAMES if b.K is not None else ("E", "F"))
    return dict(zip(LOSS_NAMES, _as_floats(vals)))


def rest_stiffness(data: ReducedDataset) -> np.ndarray:
    """Reduced tangent stiffness of the sample closest to zero displacement."""
    k = int(np.argmin(np.linalg.norm(data.x, axis=1)))
    if not data.has_K[k]:
        raise InputError("no stiffness stored at the rest state")
    return data.K[k]


def train_initialization(interp: ReducedDataset, test_sets: Sequence[ReducedDataset],
                         plan: SplitPlan, config: TrainConfig, strategy: BalancingStrategy,
                         init_index: int) -> TrainedRun:
    torch.set_num_threads(1)
    train, val, test = split(interp, test_sets, plan, init_index)
    seed = config.seed_base + init_index
    std = Standardizer.fit(train.x) if config.standardize else None
    model = build_model(interp.r, config.width, config.depth, seed, std,
                        rest_stiffness(interp) if config.physical_init else None)
    _, best_epoch, history, failed = train_model(model, train, val, config, strategy)
    if failed is not None:
        log.warning("init %d failed at epoch %d", init_index, failed)
    ok = len(history) > 0
    best_val = dict(zip(LOSS_NAMES, history[best_epoch, 4:7].tolist())) if ok else {}
    train_idx, _ = split_indices(len(interp), plan, init_index)
    return TrainedRun(init_index, seed, model, history, best_epoch, best_val,
                      _evaluate(model, test), failed, train_idx)


def train(interp: ReducedDataset, test_sets: Sequence[ReducedDataset], plan: SplitPlan,
          config: TrainConfig, strategy: BalancingStrategy, jobs: int = 1) -> list[TrainedRun]:
    """All ``config.n_inits`` initializations; failed runs are kept and flagged."""
    args = [(interp, list(test_sets), plan, config, strategy, i) for i in range(config.n_inits)]
    if jobs > 1 and config.n_inits > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_star, args))
    return [train_initialization(*a) for a in args]


def _train_star(args):
    return train_initialization(*args)
