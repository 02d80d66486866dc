"""Experiment configuration (YAML) and its validation.

Top-level keys: ``output_dir``, ``geometry``, ``loads``, ``newton``, ``reduction``,
``tpwl``, ``split``, ``training``, ``smoke``.  See ``configs/default.yaml`` for a
fully commented example.
"""
from __future__ import annotations

import itertools
import math
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import refmodel
from .errors import InputError
from .training import PRESETS, BalancingStrategy, TrainConfig


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LatticeConfig(_Model):
    bays: int = Field(16, ge=1)
    rows: int = Field(3, ge=2)
    bay_length: float = Field(0.1, gt=0)
    row_height: float = Field(0.1, gt=0)
    axial_rigidity: float = Field(1.0e6, gt=0)
    brace_rigidity: float | None = Field(None, gt=0)


class GeometryConfig(_Model):
    """Either a generated ``lattice`` or explicit ``nodes``/``bars``/``fixed_dofs``."""

    lattice: LatticeConfig | None = None
    nodes: list[tuple[float, float]] | None = None
    bars: list[tuple[int, int, float]] | None = None
    fixed_dofs: list[int] | None = None
    load_node: int | None = None
    load_direction: tuple[float, float] = (0.0, 1.0)
    output_node: int | None = None
    output_direction: int = 1

    @model_validator(mode="after")
    def _one_source(self):
        explicit = [self.nodes, self.bars, self.fixed_dofs]
        if self.lattice is not None and any(v is not None for v in explicit):
            raise ValueError("give either 'lattice' or explicit nodes/bars/fixed_dofs, not both")
        if self.lattice is None and any(v is None for v in explicit):
            if any(v is not None for v in explicit):
                raise ValueError("explicit geometry needs nodes, bars and fixed_dofs")
        if self.lattice is None and self.nodes is not None and self.load_node is None:
            raise ValueError("explicit geometry needs a load_node")
        return self

    def lattice_spec(self) -> refmodel.Lattice | None:
        if self.nodes is not None:
            return None
        return refmodel.Lattice(**(self.lattice or LatticeConfig()).model_dump())

    def build(self):
        """``(geometry, B, output_row, span)``."""
        spec = self.lattice_spec()
        if spec is not None:
            geometry = refmodel.cantilever_lattice(spec)
            load_node = spec.tip_node if self.load_node is None else self.load_node
            span = spec.span
        else:
            geometry = refmodel.TrussGeometry(
                [list(p) for p in self.nodes], [b[:2] for b in self.bars],
                [b[2] for b in self.bars], tuple(self.fixed_dofs))
            load_node = self.load_node
            xs = geometry.nodes[:, 0]
            span = float(xs.max() - xs.min())
        out_node = load_node if self.output_node is None else self.output_node
        B = refmodel.point_load_matrix(geometry, load_node, self.load_direction)
        row = refmodel.output_row(geometry, out_node, self.output_direction)
        return geometry, B, row, span


class LoadConfig(_Model):
    max_load: float | Literal["auto"] = "auto"
    deflection_ratio: float = Field(0.25, gt=0)
    steps: int = Field(100, ge=1)


class NewtonConfig(_Model):
    tolerance: float = Field(1e-8, gt=0)
    max_iterations: int = Field(50, ge=1)

    def settings(self) -> refmodel.NewtonSettings:
        return refmodel.NewtonSettings(self.tolerance, self.max_iterations)


class ReductionConfig(_Model):
    r: int | None = Field(4, ge=1)
    energy: float | None = Field(None, gt=0, le=1)

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.r is None) == (self.energy is None):
            raise ValueError("set exactly one of 'r' and 'energy'")
        return self


class TpwlConfig(_Model):
    fraction: float = Field(0.5, gt=0, le=1)
    beta: float = Field(25.0, gt=0)
    epsilon: float | None = Field(None, gt=0)


class SplitConfig(_Model):
    seed: int = Field(0, ge=0)
    train_fraction: float = Field(0.5, gt=0, le=1)


class StrategyConfig(_Model):
    kind: Literal["plain_sum", "hessian_only", "static_weights", "dynamic_pinn",
                  "dynamic_same_scale"] = "static_weights"
    preset: str | None = None
    weights: tuple[float, float, float] | None = None
    ramp: tuple[int, int] | None = None
    aggregation: Literal["none", "nonconflicting"] = "none"

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v):
        if v is not None and v not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; choose from {sorted(PRESETS)}")
        return v

    def build(self) -> BalancingStrategy:
        weights = self.weights or PRESETS[self.preset or "force_only"]
        return BalancingStrategy(self.kind, tuple(weights), self.ramp, self.aggregation)

    def tag(self) -> str:
        base = self.preset if self.kind == "static_weights" and self.weights is None else self.kind
        if self.kind == "static_weights" and self.weights is not None:
            base = "w" + "_".join(f"{w:g}" for w in self.weights)
        base = {"force_only": "force"}.get(base, base)
        return base + ("_ramp" if self.ramp else "") + ("_jd" if self.aggregation != "none" else "")


class VariantConfig(_Model):
    name: str | None = None
    depth: int = Field(2, ge=1)
    width: int = Field(75, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    standardize: bool = False
    physical_init: bool = False
    strategy: StrategyConfig = StrategyConfig()

    def label(self) -> str:
        if self.name:
            return self.name
        return (f"{self.depth}x{self.width}_lr{self.learning_rate:.0e}"
                f"{'_std' if self.standardize else ''}{'_phys' if self.physical_init else ''}"
                f"_{self.strategy.tag()}")


class VariantGrid(_Model):
    """Full-factorial expansion; architectures are written ``"<depth>x<width>"``."""

    architectures: list[str] = ["2x75"]
    learning_rates: list[float] = [1e-3]
    standardize: list[bool] = [False]
    physical_init: list[bool] = [False]
    strategies: list[StrategyConfig] = [StrategyConfig()]

    def expand(self) -> list[VariantConfig]:
        out = []
        for arch, lr, std, phys, strat in itertools.product(
                self.architectures, self.learning_rates, self.standardize, self.physical_init,
                self.strategies):
            depth, width = (int(v) for v in arch.lower().split("x"))
            out.append(VariantConfig(depth=depth, width=width, learning_rate=lr, standardize=std,
                                     physical_init=phys, strategy=strat))
        return out


class TrainingConfig(_Model):
    epochs: int = Field(100_000, ge=0)
    n_inits: int = Field(10, ge=1)
    seed_base: int = Field(0, ge=0)
    variants: list[VariantConfig] = []
    grids: list[VariantGrid] = []
    final_variant: str | None = None

    def all_variants(self) -> list[VariantConfig]:
        found, seen = [], set()
        for v in [*self.variants, *(g for grid in self.grids for g in grid.expand())]:
            if v.label() in seen:
                continue
            seen.add(v.label())
            found.append(v)
        return found

    def train_config(self, variant: VariantConfig) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=variant.learning_rate,
                           depth=variant.depth, width=variant.width, n_inits=self.n_inits,
                           seed_base=self.seed_base, standardize=variant.standardize,
                           physical_init=variant.physical_init)


class SmokeConfig(_Model):
    """Scale-down applied by ``--smoke``: epochs multiplied by ``epoch_factor``
    (ramp epochs likewise), ``n_inits`` capped, lattice bays replaced, and only
    the named ``variants`` kept (all when empty)."""

    epoch_factor: float = Field(0.02, gt=0, le=1)
    n_inits: int = Field(3, ge=1)
    bays: int | None = Field(8, ge=1)
    variants: list[str] = []


class ExperimentConfig(_Model):
    output_dir: str = "runs/default"
    geometry: GeometryConfig = GeometryConfig()
    loads: LoadConfig = LoadConfig()
    newton: NewtonConfig = NewtonConfig()
    reduction: ReductionConfig = ReductionConfig()
    tpwl: TpwlConfig = TpwlConfig()
    split: SplitConfig = SplitConfig()
    training: TrainingConfig = TrainingConfig()
    smoke: SmokeConfig = SmokeConfig()

    @model_validator(mode="after")
    def _variants_nonempty(self):
        variants = self.training.all_variants()
        if not variants:
            raise ValueError("the variant grid is empty")
        names = [v.label() for v in variants]
        if self.training.final_variant is not None and self.training.final_variant not in names:
            raise ValueError(f"final_variant {self.training.final_variant!r} is not a variant")
        return self

    def smoke_scaled(self) -> "ExperimentConfig":
        s = self.smoke
        training = self.training
        keep = [v for v in training.all_variants() if not s.variants or v.label() in s.variants]
        if not keep:
            raise InputError("smoke variant list matches no variant")

        def scale(v: VariantConfig) -> VariantConfig:
            strat = v.strategy
            if strat.ramp is not None:
                ramp = tuple(int(math.ceil(e * s.epoch_factor)) for e in strat.ramp)
                strat = strat.model_copy(update={"ramp": ramp})
            return v.model_copy(update={"name": v.label(), "strategy": strat})

        final = training.final_variant
        if final is not None and final not in [v.label() for v in keep]:
            final = None
        new_training = training.model_copy(update={
            "epochs": int(math.ceil(training.epochs * s.epoch_factor)),
            "n_inits": min(training.n_inits, s.n_inits),
            "variants": [scale(v) for v in keep], "grids": [], "final_variant": final})
        geometry = self.geometry
        if s.bays is not None and geometry.nodes is None:
            lattice = (geometry.lattice or LatticeConfig()).model_copy(update={"bays": s.bays})
            geometry = geometry.model_copy(update={"lattice": lattice})
        return self.model_copy(update={"training": new_training, "geometry": geometry})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    try:
        return ExperimentConfig.model_validate(data)
    except ValueError as exc:
        raise InputError(f"invalid config {path}:\n{exc}") from exc
