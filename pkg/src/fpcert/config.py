"""Run configuration schema, validation and canonical hashing."""

from __future__ import annotations

import hashlib
import json
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bounds import METRICS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ContractionSpec(_Strict):
    kind: Literal["contraction"]
    dim: int = Field(gt=0)


class SparseCodingSpec(_Strict):
    kind: Literal["sparse_coding"]
    m: int = Field(gt=0)
    n: int = Field(gt=0)
    keep_prob: float = Field(0.1, gt=0.0, le=1.0)
    snr_db: float = 40.0


class UnconstrainedQPSpec(_Strict):
    kind: Literal["unconstrained_qp"]
    n: int = Field(gt=0)


class DeblurringSpec(_Strict):
    kind: Literal["deblurring"]
    side: int = Field(gt=0)
    blur_size: int = Field(8, gt=0)
    noise_std: float = Field(0.001, ge=0.0)
    rho: float = Field(1e-4, ge=0.0)
    images_path: Optional[str] = None


FamilySpec = Annotated[
    Union[ContractionSpec, SparseCodingSpec, UnconstrainedQPSpec, DeblurringSpec], Field(discriminator="kind")
]


class WarmStartSpec(_Strict):
    kind: Literal["cold", "nearest_neighbor"] = "cold"
    n_base: int = Field(100, gt=0)


class ClassicalSpec(_Strict):
    kind: Literal["classical"]
    method: Literal["contraction", "gd", "ista", "douglas_rachford"]
    beta: Optional[float] = Field(None, gt=0.0, lt=1.0)
    step: Optional[float] = Field(None, gt=0.0)
    rho: float = Field(0.1, ge=0.0)
    warm_start: WarmStartSpec = WarmStartSpec()


class TrainSpec(_Strict):
    b_targets: tuple[float, ...] = (0.1,)
    mu: float = Field(1e3, ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(100, ge=0)
    batch_size: Optional[int] = Field(None, gt=0)
    loss: Literal["regression", "fp_residual"] = "regression"
    s0: float = Field(1e-4, gt=0.0)
    lambda_max: float = Field(100.0, gt=0.0)
    b: float = Field(100.0, gt=0.0)
    select_k: Optional[int] = Field(None, ge=0)
    select_quantile: float = Field(0.8, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _targets(self):
        if not self.b_targets or any(b <= 0.0 for b in self.b_targets):
            raise ValueError("b_targets must be a nonempty list of positive values")
        return self


class LearnedSpec(_Strict):
    kind: Literal["learned"]
    arch: Literal["alista", "tilista", "lista", "l2ws"]
    K: int = Field(gt=0)
    rho: float = Field(0.1, ge=0.0)
    layer_dims: Optional[tuple[int, ...]] = None
    train: TrainSpec = TrainSpec()
    H: int = Field(2000, gt=0)
    distance_bound_delta: Optional[float] = Field(None, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _dims(self):
        if self.arch == "l2ws" and self.layer_dims is None:
            raise ValueError("l2ws needs layer_dims")
        if self.arch != "l2ws" and self.layer_dims is not None:
            raise ValueError(f"layer_dims is only used by l2ws, not {self.arch}")
        return self


OptimizerSpec = Annotated[Union[ClassicalSpec, LearnedSpec], Field(discriminator="kind")]


class ToleranceSpec(_Strict):
    min: float
    max: float
    count: int = Field(81, gt=0)
    scale: Literal["linear", "log"] = "log"

    @model_validator(mode="after")
    def _range(self):
        if self.max < self.min:
            raise ValueError("max must not be below min")
        if self.scale == "log" and self.min <= 0.0:
            raise ValueError("a log-scale grid needs min > 0")
        return self

    def values(self) -> np.ndarray:
        if self.scale == "log":
            return np.logspace(np.log10(self.min), np.log10(self.max), self.count)
        return np.linspace(self.min, self.max, self.count)


class BoundSpec(_Strict):
    delta: float = Field(gt=0.0, lt=1.0)
    omega: float = Field(0.0, ge=0.0, lt=1.0)
    metrics: tuple[str, ...] = ("fp_residual",)
    tolerances: dict[str, ToleranceSpec]
    quantiles: tuple[float, ...] = ()
    k_max: int = Field(gt=0)
    ks: Optional[tuple[int, ...]] = None

    @model_validator(mode="after")
    def _consistent(self):
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")
            if m not in self.tolerances:
                raise ValueError(f"no tolerance grid for metric {m!r}")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantiles must lie in (0, 1)")
        if self.ks is not None and any(not 0 <= k <= self.k_max for k in self.ks):
            raise ValueError("every k must lie in 0..k_max")
        return self

    def iteration_set(self) -> tuple[int, ...]:
        return tuple(range(self.k_max + 1)) if self.ks is None else tuple(sorted(set(self.ks)))


CLASSICAL_FAMILY = {
    "contraction": "contraction",
    "gd": "unconstrained_qp",
    "ista": "sparse_coding",
    "douglas_rachford": "deblurring",
}


class RunConfig(_Strict):
    seed: int = 0
    family: FamilySpec
    n_train: int = Field(gt=0)
    n_test: int = Field(0, ge=0)
    optimizer: OptimizerSpec
    bounds: BoundSpec
    output_dir: str = "out"

    @model_validator(mode="after")
    def _ledger(self):
        opt, b = self.optimizer, self.bounds
        learned = opt.kind == "learned"
        n_bt = len(opt.train.b_targets) if learned else 1
        n_tol = max(spec.count for spec in b.tolerances.values())
        per = b.delta + (b.omega if learned else 0.0)
        if n_bt * n_tol * per >= 1.0:
            raise ValueError(
                f"bounds.tolerances: failure budget {n_bt} x {n_tol} x {per} is not below 1; no certificate would hold"
            )
        if learned and b.omega <= 0.0:
            raise ValueError("bounds.omega: learned optimizers need omega > 0 for the Monte Carlo step")
        if learned and opt.arch != "l2ws" and b.k_max > opt.K:
            raise ValueError(f"bounds.k_max: {opt.arch} has K={opt.K} learned steps; k_max={b.k_max} exceeds it")
        if learned and opt.arch in ("alista", "tilista", "lista") and self.family.kind != "sparse_coding":
            raise ValueError(f"family.kind: {opt.arch} needs the sparse_coding family")
        if learned and opt.arch == "l2ws" and self.family.kind != "unconstrained_qp":
            raise ValueError("family.kind: l2ws needs the unconstrained_qp family")
        if not learned:
            need = CLASSICAL_FAMILY[opt.method]
            if self.family.kind != need:
                raise ValueError(f"family.kind: classical method {opt.method} needs the {need} family")
            if opt.method == "contraction" and opt.beta is None:
                raise ValueError("optimizer.beta: the contraction method needs beta")
            if opt.warm_start.kind == "nearest_neighbor" and self.family.kind == "contraction":
                raise ValueError("optimizer.warm_start.kind: nearest-neighbor warm starts are not defined for the contraction family")
        if learned and self.n_train < 8:
            raise ValueError("n_train: PAC-Bayes training needs n_train >= 8")
        return self


class ConfigError(ValueError):
    """Schema violation, reported with the failing key path."""


# discriminated-union tags that pydantic inserts into error locations
_TAGGED = {"family", "optimizer"}


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = [str(p) for p in e["loc"]]
        if len(loc) >= 2 and loc[0] in _TAGGED:
            del loc[1]
        msg = e["msg"].removeprefix("Value error, ")
        # whole-config checks carry their own key path in the message
        lines.append(f"{'.'.join(loc)}: {msg}" if loc else msg)
    return "; ".join(lines)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(data)


def canonical_json(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()
