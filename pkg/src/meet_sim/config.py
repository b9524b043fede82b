"""Configuration schema and defaults for every study.

Configs are YAML documents validated against these pydantic models.  Unknown
keys are rejected everywhere.  This module is the single source of defaults;
the README lists the same values.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    """Bad or unreadable configuration (CLI exit code 2)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Road(_Strict):
    length: float = Field(400.0, gt=0)
    lanes: int = Field(2, ge=1)
    v2v_range: float = Field(150.0, gt=0)
    bs_position: Optional[float] = None


class Traffic(_Strict):
    rho_max: float = Field(0.2, gt=0, description="vehicles per meter")
    v_max: float = Field(35.0, gt=0)
    velocity: float = Field(15.0, ge=0)
    velocity_spread: float = Field(0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _speed_limit(self):
        if self.velocity > self.v_max:
            raise ValueError(f"velocity {self.velocity} exceeds v_max {self.v_max}")
        return self


class DistributionSpec(_Strict):
    family: Literal["exponential", "shifted-exponential", "poisson", "uniform", "normal", "constant"]
    rate: Optional[float] = None
    shift: Optional[float] = None
    mean: Optional[float] = None
    low: Optional[float] = None
    high: Optional[float] = None
    std: Optional[float] = None
    value: Optional[float] = None

    def params(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class DnnConfigSpec(_Strict):
    name: str
    workload: float = Field(gt=0)
    accuracy: float = Field(ge=0, le=1)


class I2VBlock(_Strict):
    bs_task_rate: float = Field(0.5, gt=0, description="tasks/s generated at the BS")
    allow_duplicates: bool = True


class OffloadParams(_Strict):
    scheme: Literal["v2v", "i2v"] = "v2v"
    road: Road = Road(length=1000.0)
    traffic: Traffic = Traffic(v_max=20.0, velocity=10.0)
    ue_opv_ratio: float = Field(0.25, gt=0, description="UE density over OPV density")
    arrival_rate: float = Field(7.0, gt=0, description="tasks/s per UE")
    deadline: float = Field(0.2, gt=0)
    service_rate: float = Field(10.0, gt=0)
    workload: float = Field(1.0, gt=0)
    replicas: Union[int, Literal["auto"]] = "auto"
    r_max: int = Field(4, ge=1)
    exploration: float = Field(math.sqrt(2.0), ge=0)
    broadcast_interval: float = Field(10.0, gt=0)
    arm_stale_horizon: float = Field(30.0, gt=0)
    transfer_delay: Union[float, DistributionSpec] = 0.0
    cancel_on_success: bool = False
    count_unoffloadable: bool = True
    horizon: float = Field(300.0, gt=0)
    warmup: Optional[float] = Field(None, ge=0)
    dnn_configs: Optional[List[DnnConfigSpec]] = None
    i2v: I2VBlock = I2VBlock()

    @field_validator("replicas")
    @classmethod
    def _positive(cls, v):
        if v != "auto" and v < 1:
            raise ValueError("replicas must be >= 1 or 'auto'")
        return v


class FedsimParams(_Strict):
    road: Road = Road(length=400.0)
    traffic: Traffic = Traffic(rho_max=0.2, v_max=35.0, velocity=15.0)
    participation: float = Field(0.05, ge=0, le=1)
    local_iters: int = Field(20, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    round_delay: DistributionSpec = DistributionSpec(family="shifted-exponential", rate=10.0, shift=0.1)
    aggregation: Literal["mixing", "periodic"] = "mixing"
    beta: float = Field(0.1, gt=0, le=1)
    period: float = Field(10.0, gt=0)
    repeat_rounds: bool = False
    horizon: float = Field(13000.0, gt=0)
    eval_interval: float = Field(10.0, gt=0)
    features: int = Field(16, ge=2)
    classes: int = Field(8, ge=2)
    separation: float = Field(3.0, ge=0)
    eval_size: int = Field(5000, ge=1)
    samples_per_client: int = Field(200, ge=1)
    noniid_strength: float = Field(4.0, ge=0)
    top_k: int = Field(3, ge=1)
    accuracy_threshold: float = Field(0.95, gt=0, le=1)
    threshold_metric: Literal["top1", "topk"] = "topk"

    @model_validator(mode="after")
    def _topk(self):
        if self.top_k > self.classes:
            raise ValueError(f"top_k={self.top_k} exceeds classes={self.classes}")
        return self


class Capacities(_Strict):
    es: float = Field(30.0, ge=0)
    inv: float = Field(10.0, ge=0)
    opv: float = Field(1.0, ge=0)


class DeployParams(_Strict):
    rows: int = Field(6, ge=1)
    cols: int = Field(6, ge=1)
    cell_radius: float = Field(200.0, gt=0)
    gamma: Optional[List[float]] = None
    base_load: float = Field(30.0, ge=0, description="mean tasks/slot in a cell with gamma=1")
    capacities: Capacities = Capacities()
    lambda_opv: float = Field(5.0, ge=0)
    lambda_es: List[float] = [0.4, 0.6, 0.8, 1.0, 1.2]
    inv_grid_step: float = Field(0.05, gt=0)
    inv_search_max: float = Field(12.0, ge=0)
    inv_placement: Literal["traffic", "uniform"] = "traffic"
    alpha: float = Field(0.5, ge=0)
    target_pb: float = Field(0.001, gt=0, lt=1)
    slots: int = Field(2000, ge=1)
    p_bs_kw: float = Field(1.0, ge=0)
    p_inv_kw: float = Field(0.5, ge=0)

    @field_validator("gamma")
    @classmethod
    def _nonneg(cls, v):
        if v is not None and any(g < 0 for g in v):
            raise ValueError("gamma values must be >= 0")
        return v

    @model_validator(mode="after")
    def _gamma_len(self):
        if self.gamma is not None and len(self.gamma) != self.rows * self.cols:
            raise ValueError(f"gamma has {len(self.gamma)} entries, lattice has {self.rows * self.cols} cells")
        return self


STUDY_BLOCK = {"offload": "offload", "fedsim": "fedsim", "deploy": "deploy"}


class ExperimentConfig(_Strict):
    study: Literal["deploy", "offload", "fedsim"]
    seed: int = Field(0, ge=0, lt=2**64)
    replications: int = Field(1, ge=1)
    sweep: Dict[str, List[Any]] = {}
    output: str = "results"
    offload: OffloadParams = OffloadParams()
    fedsim: FedsimParams = FedsimParams()
    deploy: DeployParams = DeployParams()

    def block(self) -> BaseModel:
        return getattr(self, STUDY_BLOCK[self.study])

    @model_validator(mode="after")
    def _check_sweep(self):
        block = getattr(self, STUDY_BLOCK[self.study])
        for key, values in self.sweep.items():
            path = resolve_param(block, key)
            if path is None:
                raise ValueError(f"sweep key {key!r} is not a parameter of the {self.study} study")
            if not values:
                raise ValueError(f"sweep key {key!r} has no values")
            for v in values:
                set_param(block.model_copy(deep=True), path, v)
        return self


def resolve_param(model: BaseModel, key: str) -> Optional[tuple]:
    """Dotted path for ``key``: either a dotted path or a unique leaf field name."""
    parts = tuple(key.split("."))
    node = model
    ok = True
    for p in parts:
        if isinstance(node, BaseModel) and p in type(node).model_fields:
            node = getattr(node, p)
        else:
            ok = False
            break
    if ok:
        return parts
    if len(parts) == 1:
        hits = []
        for name, value in model:
            if isinstance(value, BaseModel) and parts[0] in type(value).model_fields:
                hits.append((name, parts[0]))
        if len(hits) == 1:
            return hits[0]
    return None


def get_param(model: BaseModel, path: tuple):
    node = model
    for p in path:
        node = getattr(node, p)
    return node


def set_param(model: BaseModel, path: tuple, value) -> None:
    node = model
    for p in path[:-1]:
        node = getattr(node, p)
    setattr(node, path[-1], value)


def with_param(model: BaseModel, key: str, value) -> BaseModel:
    """Deep copy of ``model`` with ``key`` (see :func:`resolve_param`) set to ``value``."""
    path = resolve_param(model, key)
    if path is None:
        raise ConfigError(f"unknown parameter {key!r}")
    out = model.model_copy(deep=True)
    set_param(out, path, value)
    return out


def _format_errors(exc: ValidationError, source: str) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            lines.append(f"{source}: unknown key {err['loc'][-1]!r} at {loc}")
        else:
            lines.append(f"{source}: {loc}: {err['msg']}")
    return "\n".join(lines)


def config_from_mapping(data: Any, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_mapping(data or {}, str(path))


def resolved_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
