"""Relative error metrics, interpolation/extrapolation reports and study summaries.

Quantiles use linear interpolation between order statistics (NumPy's default).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError
from .reduction import PodBasis

STAT_NAMES = ("min", "q1", "median", "q3", "max")


def relative_error(pred, ref) -> float:
    """``||pred - ref|| / ||ref||``; 0 when both vanish, ``inf`` when only ``ref`` does."""
    pred = np.atleast_1d(np.asarray(pred, dtype=float))
    ref = np.atleast_1d(np.asarray(ref, dtype=float))
    if pred.shape != ref.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {ref.shape}")
    num = float(np.linalg.norm(pred - ref))
    den = float(np.linalg.norm(ref))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def tip_output(x_r, basis: PodBasis, output_row) -> float | np.ndarray:
    """``(row V) x_r``; accepts a single state or a stack of states."""
    row = np.asarray(output_row, dtype=float)
    if row.shape != (basis.n,):
        raise InputError(f"output row must have length {basis.n}")
    return np.asarray(x_r, dtype=float) @ (row @ basis.V)


def quantiles(values: Iterable[float]) -> dict[str, float]:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {k: math.nan for k in STAT_NAMES}
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(STAT_NAMES, (float(x) for x in q)))


@dataclass
class SampleError:
    model: str
    case: str
    regime: str
    step: int
    load: float
    force: float
    state: float
    output: float
    diverged: bool = False
    excluded: bool = False


@dataclass
class ErrorReport:
    """Per-sample errors of one or more hyperreduced models.

    Diverged samples keep NaN errors and are counted but excluded from statistics;
    ``excluded`` marks TPWL construction samples.
    """

    samples: list[SampleError] = field(default_factory=list)

    def extend(self, rows: Iterable[SampleError]) -> None:
        self.samples.extend(rows)

    def select(self, model: str | None = None, regime: str | None = None) -> list[SampleError]:
        return [s for s in self.samples
                if (model is None or s.model == model) and (regime is None or s.regime == regime)]

    def summary(self) -> list[dict]:
        rows = []
        keys = sorted({(s.model, s.regime) for s in self.samples})
        for model, regime in keys:
            chosen = self.select(model, regime)
            usable = [s for s in chosen if not s.diverged and not s.excluded]
            for quantity in ("force", "state", "output"):
                rows.append({"model": model, "regime": regime, "quantity": quantity,
                             "samples": len(chosen), "diverged": sum(s.diverged for s in chosen),
                             "excluded": sum(s.excluded for s in chosen),
                             **quantiles(getattr(s, quantity) for s in usable)})
        return rows

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cols = ["model", "case", "regime", "step", "load", "force", "state", "output",
                "diverged", "excluded"]
        with open(directory / "errors_long.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for s in self.samples:
                w.writerow([s.model, s.case, s.regime, s.step, repr(s.load), repr(s.force),
                            repr(s.state), repr(s.output), int(s.diverged), int(s.excluded)])
        write_rows(directory / "error_summary.csv", self.summary())


def write_rows(path, rows: Sequence[Mapping]) -> None:
    """CSV with the keys of the first row as header; floats written with ``repr``."""
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def case_errors(model: str, case: str, regime: str, loads, x_r_pred, x_r_ref, f_pred, f_ref,
                y_pred, y_ref, converged, excluded_steps=()) -> list[SampleError]:
    """Per-step errors for one model on one load case."""
    excluded_steps = set(int(s) for s in excluded_steps)
    rows = []
    for k in range(len(loads)):
        ok = bool(converged[k])
        rows.append(SampleError(
            model, case, regime, k, float(np.ravel(loads[k])[0]),
            relative_error(f_pred[k], f_ref[k]),
            relative_error(x_r_pred[k], x_r_ref[k]) if ok else math.nan,
            relative_error(y_pred[k], y_ref[k]) if ok else math.nan,
            diverged=not ok, excluded=k in excluded_steps))
    return rows


def summarize_study(runs_by_variant: Mapping[str, Sequence[Mapping]]) -> list[dict]:
    """Box-plot statistics of best-validation and test force losses per variant.

    Each run is a mapping with ``best_val_F``, ``test_F`` and ``failed`` entries.
    """
    rows = []
    for variant, runs in runs_by_variant.items():
        if not runs:
            raise InputError(f"variant {variant!r} has no runs")
        ok = [r for r in runs if not r.get("failed")]
        for metric in ("best_val_F", "test_F"):
            rows.append({"variant": variant, "metric": metric, "runs": len(runs),
                         "failed": len(runs) - len(ok),
                         **quantiles(r[metric] for r in ok)})
    return rows


def write_study(path, rows: Sequence[Mapping], runs_by_variant: Mapping[str, Sequence[Mapping]]):
    """Summary CSV plus a long-format file with one line per initialization for plotting."""
    path = Path(path)
    write_rows(path, rows)
    long_rows = [{"variant": v, "init": r["init_index"], "best_val_F": r["best_val_F"],
                  "test_F": r["test_F"], "failed": int(bool(r.get("failed")))}
                 for v, runs in runs_by_variant.items() for r in runs]
    write_rows(path.with_name(path.stem + "_points.csv"), long_rows)
