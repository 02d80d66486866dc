"""Snapshot containers, the ``.hrsnap`` archive format and train/val/test splitting.

``.hrsnap`` byte layout (all little-endian)::

    0   8 bytes  magic  b"HRSNAP\\0\\0"
    8   uint32   format version (currently 1)
    12  uint32   n      state dimension (r for reduced data)
    16  uint32   m      number of steps
    20  uint32   p      load dimension
    24  m bytes  stiffness mask, 1 if step k carries a tangent matrix
    ..  float64  loads  m*p
        float64  x      m*n
        float64  e      m
        float64  f      m*n
        float64  K      (sum of mask)*n*n, row-major, only for masked steps
    end uint32   CRC32 of every preceding byte

A ``.json`` sidecar next to the archive carries names, labels and provenance.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError
from .refmodel import FullState

MAGIC = b"HRSNAP\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")


def write_hrsnap(path, loads, x, e, f, K, mask) -> None:
    loads, x, f = (np.ascontiguousarray(a, dtype="<f8") for a in (loads, x, f))
    e = np.ascontiguousarray(e, dtype="<f8")
    mask = np.asarray(mask, dtype=bool)
    m, n = x.shape
    p = loads.shape[1]
    Kp = np.ascontiguousarray(K[mask], dtype="<f8") if mask.any() else np.zeros((0, n, n), "<f8")
    payload = b"".join([
        _HEADER.pack(MAGIC, VERSION, n, m, p),
        mask.astype(np.uint8).tobytes(),
        loads.tobytes(), x.tobytes(), e.tobytes(), f.tobytes(), Kp.tobytes(),
    ])
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def read_hrsnap(path):
    """Returns ``(loads, x, e, f, K, mask)``; K rows of unmasked steps are zero."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise FormatError(f"{path}: file too short")
    magic, version, n, m, p = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    if len(raw) < off + m + 4:
        raise FormatError(f"{path}: truncated")
    mask = np.frombuffer(raw, np.uint8, m, off).astype(bool)
    off += m
    n_k = int(mask.sum())
    expected = off + 8 * (m * p + 2 * m * n + m + n_k * n * n) + 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if crc != zlib.crc32(raw[:-4]):
        raise FormatError(f"{path}: checksum mismatch")

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(float)
        off += 8 * count
        return arr

    loads = take(m * p, (m, p))
    x = take(m * n, (m, n))
    e = take(m, (m,))
    f = take(m * n, (m, n))
    K = np.zeros((m, n, n))
    K[mask] = take(n_k * n * n, (n_k, n, n))
    return loads, x, e, f, K, mask


@dataclass(eq=False)
class SnapshotSet:
    """Per-step records of one load case.  ``K[k]`` is meaningless where ``has_K[k]`` is False."""

    x: np.ndarray
    e: np.ndarray
    f: np.ndarray
    K: np.ndarray
    has_K: np.ndarray
    load_values: np.ndarray
    name: str = "case"
    case_label: str = "interpolation"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        m = len(self.x)
        if not (len(self.e) == len(self.f) == len(self.K) == len(self.has_K)
                == len(self.load_values) == m):
            raise InputError("snapshot arrays have inconsistent lengths")

    @classmethod
    def from_states(cls, states: Sequence[FullState], load_values, **kwargs) -> "SnapshotSet":
        if not states:
            raise InputError("no states")
        n = len(states[0].x)
        has_K = np.array([s.K is not None for s in states])
        K = np.stack([s.K if s.K is not None else np.zeros((n, n)) for s in states])
        loads = np.asarray(load_values, dtype=float).reshape(len(states), -1)
        return cls(np.stack([s.x for s in states]), np.array([s.e for s in states]),
                   np.stack([s.f for s in states]), K, has_K, loads, **kwargs)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def states(self) -> list[FullState]:
        return [FullState(self.x[k], float(self.e[k]), self.f[k],
                          self.K[k] if self.has_K[k] else None) for k in range(len(self))]

    def subset(self, indices) -> "SnapshotSet":
        idx = np.asarray(indices, dtype=int)
        return SnapshotSet(self.x[idx], self.e[idx], self.f[idx], self.K[idx], self.has_K[idx],
                           self.load_values[idx], self.name, self.case_label, dict(self.provenance))

    @classmethod
    def concatenate(cls, sets: Sequence["SnapshotSet"]) -> "SnapshotSet":
        if not sets:
            raise InputError("nothing to concatenate")
        cat = lambda attr: np.concatenate([getattr(s, attr) for s in sets])  # noqa: E731
        labels = {s.case_label for s in sets}
        return cls(cat("x"), cat("e"), cat("f"), cat("K"), cat("has_K"), cat("load_values"),
                   "+".join(s.name for s in sets), labels.pop() if len(labels) == 1 else "mixed",
                   {})

    def strip_stiffness(self, steps=None) -> "SnapshotSet":
        """Copy with tangent matrices dropped at ``steps`` (all steps by default)."""
        has_K = self.has_K.copy()
        has_K[slice(None) if steps is None else np.asarray(steps)] = False
        K = np.where(has_K[:, None, None], self.K, 0.0)
        return SnapshotSet(self.x, self.e, self.f, K, has_K, self.load_values,
                           self.name, self.case_label, dict(self.provenance))

    def save(self, path) -> Path:
        path = Path(path).with_suffix(".hrsnap")
        write_hrsnap(path, self.load_values, self.x, self.e, self.f, self.K, self.has_K)
        sidecar = {"format": "hrsnap", "version": VERSION, "name": self.name,
                   "case_label": self.case_label, "provenance": self.provenance}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "SnapshotSet":
        path = Path(path).with_suffix(".hrsnap")
        loads, x, e, f, K, mask = read_hrsnap(path)
        meta = {}
        if path.with_suffix(".json").exists():
            try:
                meta = json.loads(path.with_suffix(".json").read_text())
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: unreadable sidecar") from exc
        return cls(x, e, f, K, mask, loads, meta.get("name", path.stem),
                   meta.get("case_label", "interpolation"), meta.get("provenance", {}))


@dataclass(frozen=True)
class SplitPlan:
    seed: int = 0
    train_fraction: float = 0.5
    val_fraction: float = 0.5
    test_cases: tuple[str, ...] = ("forward", "reverse", "reverse-far")

    def __post_init__(self):
        if not (0 < self.train_fraction <= 1 and 0 <= self.val_fraction < 1):
            raise InputError("fractions out of range")
        if not math.isclose(self.train_fraction + self.val_fraction, 1.0):
            raise InputError("train and validation fractions must sum to one")


def split_indices(m: int, plan: SplitPlan, init_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Random train/validation index sets; train receives the rounding surplus."""
    if m < 1:
        raise InputError("empty interpolation set")
    if init_index < 0:
        raise InputError("init_index must be >= 0")
    rng = np.random.default_rng([plan.seed, init_index])
    perm = rng.permutation(m)
    n_train = min(m, math.ceil(round(m * plan.train_fraction, 9)))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(interp, test_sets, plan: SplitPlan, init_index: int):
    """``(train, val, test)`` subsets.

    ``interp`` and the entries of ``test_sets`` may be anything exposing
    ``__len__``, ``subset(indices)`` and a ``concatenate`` classmethod, i.e.
    :class:`hyperrom.reduction.ReducedDataset`.
    """
    train_idx, val_idx = split_indices(len(interp), plan, init_index)
    test = type(interp).concatenate(list(test_sets)) if test_sets else None
    return interp.subset(train_idx), interp.subset(val_idx), test
