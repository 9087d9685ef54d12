"""Run configuration: one strict human-readable YAML document per experiment.

Unknown keys are rejected so a typo cannot silently change a run. File
outputs live under a run directory named by config hash and seed: the base
sections (world, schedule, model, projector, pretrain, seed) hash to the
base run directory holding the pretrained artifacts; each personalization
arm hashes its own section into a subdirectory, so arms trained from the
same base are comparable side by side.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .denoiser import DenoiserArch
from .losses import LossWeights
from .schedule import NoiseSchedule, build_schedule
from .world import GridWorld, build_world


class ConfigError(ValueError):
    pass


def _coerce(dc_type, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        f = known[name]
        if f.type in ("int",) and isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected int, got bool")
        if f.type == "int":
            if not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected int, got {value!r}")
        elif f.type == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected number, got {value!r}")
            value = float(value)
        elif f.type == "str":
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{name}: expected string, got {value!r}")
        kwargs[name] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass(frozen=True)
class WorldSpec:
    subjects: int = 4
    contexts: int = 4
    dim: int = 2
    component_std: float = 0.25
    coupling: float = 0.3
    grid_pitch: float = 3.0

    def build(self, seed: int) -> GridWorld:
        return build_world(
            S=self.subjects,
            G=self.contexts,
            d=self.dim,
            std=self.component_std,
            coupling=self.coupling,
            seed=seed,
            pitch=self.grid_pitch,
        )


@dataclass(frozen=True)
class ScheduleSpec:
    num_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.2

    def build(self) -> NoiseSchedule:
        return build_schedule(self.num_steps, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class ModelSpec:
    embed_dim: int = 32
    hidden_width: int = 128
    hidden_layers: int = 3
    time_enc_dim: int = 32
    input_scale: float = 3.0

    def build(self, data_dim: int) -> DenoiserArch:
        return DenoiserArch(
            data_dim=data_dim,
            embed_dim=self.embed_dim,
            hidden_width=self.hidden_width,
            hidden_layers=self.hidden_layers,
            time_enc_dim=self.time_enc_dim,
            input_scale=self.input_scale,
        )


@dataclass(frozen=True)
class ProjectorSpec:
    out_dim: int = 16
    temperature: float = 10.0
    n_pairs: int = 20000
    batch_size: int = 256
    epochs: int = 5
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class PretrainSpec:
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-3
    drop_both: float = 0.1
    drop_subject: float = 0.1
    drop_context: float = 0.1


@dataclass(frozen=True)
class PersonalizeSpec:
    steps: int = 1000
    batch_size: int = 0  # 0 = the full reference set each step
    learning_rate: float = 1e-4
    embedding_learning_rate: float = 1e-3
    regime: str = "full"
    eval_every: int = 50
    eval_samples: int = 500
    recon_weight: float = 1.0
    dd_weight: float = 0.2
    pd_weight: float = 0.002
    pd_cosine_target: "str | float" = "superclass"  # "superclass" or a fixed cosine
    reference_size: int = 4
    coupled_context: str = "g1"
    personal_init_noise: float = 0.0
    trace_trajectories: int = 8

    def loss_weights(self) -> LossWeights:
        return LossWeights(recon=self.recon_weight, dd=self.dd_weight, pd=self.pd_weight)

    def cosine_target_value(self) -> float | None:
        if self.pd_cosine_target == "superclass":
            return None
        if isinstance(self.pd_cosine_target, (int, float)) and not isinstance(
            self.pd_cosine_target, bool
        ):
            return float(self.pd_cosine_target)
        try:
            return float(self.pd_cosine_target)
        except ValueError:
            raise ConfigError(
                f"pd_cosine_target must be 'superclass' or a number, got {self.pd_cosine_target!r}"
            ) from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    world: WorldSpec = field(default_factory=WorldSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    projector: ProjectorSpec = field(default_factory=ProjectorSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    personalize: PersonalizeSpec = field(default_factory=PersonalizeSpec)

    def base_hash(self) -> str:
        payload = {
            "seed": self.seed,
            "world": asdict(self.world),
            "schedule": asdict(self.schedule),
            "model": asdict(self.model),
            "projector": asdict(self.projector),
            "pretrain": asdict(self.pretrain),
        }
        return _digest(payload)

    def arm_hash(self) -> str:
        return _digest(asdict(self.personalize))

    def base_dir(self) -> Path:
        return Path(self.out_dir) / f"{self.base_hash()}-s{self.seed}"

    def arm_dir(self) -> Path:
        return self.base_dir() / f"arm-{self.arm_hash()}"


def _digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


_SECTIONS = {
    "world": WorldSpec,
    "schedule": ScheduleSpec,
    "model": ModelSpec,
    "projector": ProjectorSpec,
    "pretrain": PretrainSpec,
    "personalize": PersonalizeSpec,
}


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"seed", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError(f"seed: expected int, got {raw['seed']!r}")
        kwargs["seed"] = raw["seed"]
    if "out_dir" in raw:
        if not isinstance(raw["out_dir"], str):
            raise ConfigError(f"out_dir: expected string, got {raw['out_dir']!r}")
        kwargs["out_dir"] = raw["out_dir"]
    for name, dc in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _coerce(dc, raw[name], name)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path} is not valid YAML: {err}") from err
    if raw is None:
        raw = {}
    return parse_config(raw)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(asdict(config), sort_keys=True)
