"""Stage orchestration: generate -> reduce -> build-tpwl / train -> solve -> report.

Each stage writes into its own directory under the output root together with a
``stage.json`` recording a hash of the inputs that determine it (relevant config
sections plus the hashes of upstream stages) and the SHA-256 of every output
file.  A stage whose recorded hash matches and whose outputs are intact is
skipped unless forced.  Training is additionally resumable per variant and
initialization.  Timestamps appear only in ``stage.json``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__, archive, evaluation, refmodel, tpwl
from .config import ExperimentConfig
from .dataset import SnapshotSet, SplitPlan
from .errors import PipelineError
from .hypersolver import HyperModel, SolveTrace, solve_reduced
from .pann import PannModel
from .reduction import PodBasis, ReducedDataset, compute_basis, project, rank_for_energy
from .reduction import reconstruction_error
from .training import TrainedRun, train_initialization

log = logging.getLogger(__name__)

STAGES = ("generate", "reduce", "build-tpwl", "train", "solve", "report")
STAGE_DIRS = {"generate": "snapshots", "reduce": "reduced", "build-tpwl": "tpwl",
              "train": "train", "solve": "solve", "report": "report"}
UPSTREAM = {"generate": (), "reduce": ("generate",), "build-tpwl": ("reduce",),
            "train": ("reduce",), "solve": ("build-tpwl", "train"), "report": ("solve",)}
MODELS = ("tpwl", "pann")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _set_deterministic() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _train_task(args) -> str:
    """Worker: one initialization of one variant, written to ``out_dir``."""
    reduced_dir, case_names, plan, train_cfg, strategy, init_index, out_dir, key = args
    _set_deterministic()
    reduced_dir, out_dir = Path(reduced_dir), Path(out_dir)
    interp = ReducedDataset.load(reduced_dir / case_names[0])
    tests = [ReducedDataset.load(reduced_dir / c) for c in case_names[1:]]
    run = train_initialization(interp, tests, plan, train_cfg, strategy, init_index)
    run.write(out_dir)
    (out_dir / "key.json").write_text(json.dumps({"key": key}, indent=2))
    return str(out_dir)


class Pipeline:
    def __init__(self, config: ExperimentConfig, root, force: bool = False, jobs: int = 1):
        self.config = config
        self.root = Path(root)
        self.force = force
        self.jobs = max(1, int(jobs))

    # -- bookkeeping --------------------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    def _record_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "stage.json"

    def record(self, stage: str) -> dict | None:
        path = self._record_path(stage)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            return None

    def _require(self, stage: str) -> dict:
        rec = self.record(stage)
        if rec is None or not self._intact(stage, rec):
            raise PipelineError(
                f"missing or incomplete output of stage '{stage}' under {self.root}; "
                f"run `hyperrom {stage}` first")
        return rec

    def _intact(self, stage: str, rec: dict) -> bool:
        base = self.stage_dir(stage)
        for rel, sha in rec.get("outputs", {}).items():
            p = base / rel
            if not p.exists() or _file_sha(p) != sha:
                return False
        return True

    def _settings(self, stage: str) -> dict:
        c = self.config
        return {
            "generate": {"geometry": c.geometry.model_dump(), "loads": c.loads.model_dump(),
                         "newton": c.newton.model_dump()},
            "reduce": {"reduction": c.reduction.model_dump()},
            "build-tpwl": {"tpwl": c.tpwl.model_dump()},
            "train": {"split": c.split.model_dump(), "training": c.training.model_dump()},
            "solve": {"newton": c.newton.model_dump(),
                      "final_variant": c.training.final_variant},
            "report": {},
        }[stage]

    def stage_hash(self, stage: str) -> str:
        upstream = {u: self._require(u)["hash"] for u in UPSTREAM[stage]}
        return _digest({"stage": stage, "settings": self._settings(stage), "upstream": upstream,
                        "version": __version__})

    def _finish(self, stage: str, key: str, info: dict) -> dict:
        base = self.stage_dir(stage)
        outputs = {str(p.relative_to(base)): _file_sha(p)
                   for p in sorted(base.rglob("*")) if p.is_file() and p.name != "stage.json"}
        rec = {"stage": stage, "hash": key, "version": __version__,
               "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "info": info,
               "outputs": outputs}
        self._record_path(stage).write_text(json.dumps(rec, indent=2, sort_keys=True))
        return rec

    def run(self, stage: str) -> dict:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        _set_deterministic()
        key = self.stage_hash(stage)
        rec = self.record(stage)
        if not self.force and rec is not None and rec.get("hash") == key \
                and self._intact(stage, rec):
            log.info("%s: up to date, skipping", stage)
            return {**rec, "skipped": True}
        self.stage_dir(stage).mkdir(parents=True, exist_ok=True)
        log.info("%s: running", stage)
        info = getattr(self, "_" + stage.replace("-", "_"))()
        return {**self._finish(stage, key, info), "skipped": False}

    def run_all(self) -> list[dict]:
        return [self.run(s) for s in STAGES]

    # -- shared loaders ------------------------------------------------------------

    def problem(self):
        arrays, meta = archive.load_arrays(self.stage_dir("generate") / "problem.hrmod", "problem")
        cases = refmodel.ramp_load_cases(arrays["B"], meta["max_load"], meta["steps"])
        return arrays, meta, cases

    def reduced(self, name: str) -> ReducedDataset:
        return ReducedDataset.load(self.stage_dir("reduce") / name)

    def basis(self) -> PodBasis:
        return PodBasis.load(self.stage_dir("reduce") / "basis.hrmod")

    def case_names(self) -> list[str]:
        return [c["name"] for c in self.problem()[1]["cases"]]

    # -- stages ---------------------------------------------------------------------

    def _generate(self) -> dict:
        c = self.config
        geometry, B, row, span = c.geometry.build()
        settings = c.newton.settings()
        target = c.loads.deflection_ratio * span
        if c.loads.max_load == "auto":
            max_load = refmodel.calibrate_max_load(geometry, B, row, target, settings)
        else:
            max_load = float(c.loads.max_load)
        cases = refmodel.ramp_load_cases(B, max_load, c.loads.steps)
        out = self.stage_dir("generate")
        for case in cases:
            snaps = refmodel.solve_full(geometry, case, settings)
            snaps.save(out / case.name)
            log.info("generate: %s, %d steps", case.name, len(snaps))
        interp = SnapshotSet.load(out / cases[0].name)
        tip = float(row @ interp.x[-1])
        meta = {"max_load": max_load, "steps": c.loads.steps, "span": span,
                "geometry": geometry.digest(), "n": geometry.n,
                "cases": [{"name": k.name, "label": k.label} for k in cases]}
        archive.save_arrays(out / "problem.hrmod", "problem",
                            {"B": B, "output_row": row, "nodes": geometry.nodes}, meta)
        return {**meta, "tip_at_max_load": tip, "target_deflection": target}

    def _reduce(self) -> dict:
        names = self.case_names()
        src = self.stage_dir("generate")
        sets = [SnapshotSet.load(src / n) for n in names]
        X = np.concatenate([s.x for s in sets]).T
        rc = self.config.reduction
        r = rc.r if rc.r is not None else rank_for_energy(X, rc.energy)
        basis = compute_basis(X, r)
        out = self.stage_dir("reduce")
        basis.save(out / "basis.hrmod")
        for s in sets:
            project(basis, s).save(out / s.name)
        err = reconstruction_error(basis, X.T)
        return {"r": r, "cumulative_energy": basis.cumulative_energy,
                "rank_deficient": basis.rank_deficient,
                "max_reconstruction_error": float(err.max())}

    def _build_tpwl(self) -> dict:
        t = self.config.tpwl
        model = tpwl.build(self.reduced(self.case_names()[0]), t.fraction, t.beta, t.epsilon)
        model.save(self.stage_dir("build-tpwl") / "model")
        return {"points": len(model.points), "beta": model.beta, "epsilon": model.epsilon}

    def _train(self) -> dict:
        c = self.config
        names = self.case_names()
        plan = SplitPlan(seed=c.split.seed, train_fraction=c.split.train_fraction,
                         val_fraction=1.0 - c.split.train_fraction, test_cases=tuple(names[1:]))
        reduce_hash = self._require("reduce")["hash"]
        base = self.stage_dir("train")
        tasks, labels = [], []
        for variant in c.training.all_variants():
            label = variant.label()
            labels.append(label)
            cfg = c.training.train_config(variant)
            strategy = variant.strategy.build()
            for i in range(cfg.n_inits):
                key = _digest({"variant": variant.model_dump(), "label": label,
                               "train": cfg.to_dict(), "split": c.split.model_dump(),
                               "init": i, "reduce": reduce_hash, "version": __version__})
                out = base / label / f"init_{i:02d}"
                if not self.force and _run_complete(out, key):
                    log.info("train: %s init %d up to date", label, i)
                    continue
                tasks.append((str(self.stage_dir("reduce")), names, plan, cfg, strategy, i,
                              str(out), key))
        self._clean_stale(base, labels)
        if self.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                for done in pool.map(_train_task, tasks):
                    log.info("train: wrote %s", done)
        else:
            for t in tasks:
                log.info("train: wrote %s", _train_task(t))
        runs = self.load_runs()
        rows = evaluation.summarize_study(runs)
        evaluation.write_study(base / "study.csv", rows, runs)
        return {"variants": labels, "trained": len(tasks)}

    def _clean_stale(self, base: Path, labels: list[str]) -> None:
        n = self.config.training.n_inits
        for vdir in sorted(p for p in base.iterdir() if p.is_dir()):
            if vdir.name not in labels:
                _rmtree(vdir)
                continue
            for idir in sorted(p for p in vdir.iterdir() if p.is_dir()):
                if not idir.name.startswith("init_") or int(idir.name[5:]) >= n:
                    _rmtree(idir)

    def load_runs(self) -> dict[str, list[dict]]:
        """Per variant, one summary mapping per initialization (in config order)."""
        runs = {}
        for variant in self.config.training.all_variants():
            label = variant.label()
            rows = []
            for i in range(self.config.training.n_inits):
                path = self.stage_dir("train") / label / f"init_{i:02d}" / "manifest.json"
                if not path.exists():
                    raise PipelineError(f"missing training run {path}; run `hyperrom train`")
                m = json.loads(path.read_text())
                rows.append({"init_index": m["init_index"], "failed": m["failed_epoch"] is not None,
                             "best_val_F": m["best_val"].get("F", float("nan")),
                             "test_F": m["test"].get("F", float("nan")),
                             "best_epoch": m["best_epoch"]})
            runs[label] = rows
        return runs

    def select_pann(self) -> tuple[str, int]:
        """Final variant (or the one with the lowest median validation force loss) and
        its best non-failed initialization."""
        runs = self.load_runs()

        def med(rows):
            vals = [r["best_val_F"] for r in rows if not r["failed"]]
            return float(np.median(vals)) if vals else float("inf")

        label = self.config.training.final_variant
        if label is None:
            label = min(runs, key=lambda k: med(runs[k]))
        ok = [r for r in runs[label] if not r["failed"]] or runs[label]
        best = min(ok, key=lambda r: (r["best_val_F"], r["init_index"]))
        return label, int(best["init_index"])

    def _solve(self) -> dict:
        _, meta, cases = self.problem()
        basis = self.basis()
        label, init = self.select_pann()
        ckpt = self.stage_dir("train") / label / f"init_{init:02d}" / "checkpoint.hrmod"
        backends = {"tpwl": tpwl.TpwlModel.load(self.stage_dir("build-tpwl") / "model"),
                    "pann": PannModel.load(ckpt)}
        settings = self.config.newton.settings()
        out = self.stage_dir("solve")
        summary = {}
        for name, backend in backends.items():
            model = HyperModel(backend, basis)
            (out / name).mkdir(exist_ok=True)
            for case in cases:
                trace = solve_reduced(model, case, settings)
                trace.write_csv(out / name / f"{case.name}.csv")
                summary[f"{name}/{case.name}"] = {"converged": int(trace.converged.sum()),
                                                  "steps": len(trace),
                                                  "diverged_at": trace.diverged_at}
        (out / "selection.json").write_text(json.dumps(
            {"variant": label, "init_index": init}, indent=2, sort_keys=True))
        return {"pann_variant": label, "pann_init": init, "traces": summary}

    def _report(self) -> dict:
        arrays, meta, cases = self.problem()
        row = arrays["output_row"]
        basis = self.basis()
        sel = json.loads((self.stage_dir("solve") / "selection.json").read_text())
        ckpt = (self.stage_dir("train") / sel["variant"] / f"init_{sel['init_index']:02d}"
                / "checkpoint.hrmod")
        tpwl_model = tpwl.TpwlModel.load(self.stage_dir("build-tpwl") / "model")
        backends = {"tpwl": tpwl_model, "pann": PannModel.load(ckpt)}
        report = evaluation.ErrorReport()
        component_rows = []
        for name, backend in backends.items():
            model = HyperModel(backend, basis)
            for case in cases:
                ref = self.reduced(case.name)
                full = SnapshotSet.load(self.stage_dir("generate") / case.name)
                trace = SolveTrace.read_csv(self.stage_dir("solve") / name / f"{case.name}.csv")
                f_pred = np.array([model.force_and_tangent(x)[0] for x in ref.x])
                y_pred = evaluation.tip_output(trace.x_r, basis, row)
                y_ref = full.x @ row
                excluded = tpwl_model.source_steps if (name == "tpwl" and case.name == cases[0].name) \
                    else ()
                report.extend(evaluation.case_errors(
                    name, case.name, case.label, trace.loads, trace.x_r, ref.x, f_pred, ref.f,
                    y_pred, y_ref, trace.converged, excluded))
                for k in range(len(trace)):
                    for j in range(basis.r):
                        component_rows.append({
                            "model": name, "case": case.name, "regime": case.label, "step": k,
                            "load": float(trace.loads[k, 0]), "component": j,
                            "converged": int(trace.converged[k]),
                            "x_r_pred": float(trace.x_r[k, j]), "x_r_ref": float(ref.x[k, j]),
                            "f_r_pred": float(f_pred[k, j]), "f_r_ref": float(ref.f[k, j])})
        out = self.stage_dir("report")
        report.write(out)
        evaluation.write_rows(out / "components_long.csv", component_rows)
        runs = self.load_runs()
        evaluation.write_study(out / "study.csv", evaluation.summarize_study(runs), runs)
        medians = {f"{r['model']}/{r['regime']}": r["median"] for r in report.summary()
                   if r["quantity"] == "state"}
        return {"median_state_error": medians, "pann_variant": sel["variant"]}


def _run_complete(directory: Path, key: str) -> bool:
    try:
        stored = json.loads((directory / "key.json").read_text())["key"]
    except (OSError, ValueError, KeyError):
        return False
    needed = ("manifest.json", "history.csv", "checkpoint.hrmod")
    return stored == key and all((directory / f).exists() for f in needed)


def _rmtree(path: Path) -> None:
    for p in sorted(path.rglob("*"), reverse=True):
        p.rmdir() if p.is_dir() else p.unlink()
    path.rmdir()


def output_root(config: ExperimentConfig, smoke: bool, override=None) -> Path:
    if override is not None:
        return Path(override)
    root = Path(config.output_dir)
    return root.with_name(root.name + "-smoke") if smoke else root


def load_trained(root, variant: str, init_index: int) -> TrainedRun:
    return TrainedRun.read(Path(root) / STAGE_DIRS["train"] / variant / f"init_{init_index:02d}")

