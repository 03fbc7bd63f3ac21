"""Experiment configuration (pydantic) and named presets."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError
from .mpr import MprConfig
from .sac import SacConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MprSettings(_Strict):
    n_traj: int = Field(64, ge=1)
    h_min: int = Field(5, ge=1)
    h_max: int = Field(15, ge=1)
    anneal_fraction: float = Field(1.0, gt=0)
    lam: float = Field(1.0, gt=0)
    noise_fraction: float = Field(0.3, gt=0)
    noise_std: Optional[list[float]] = None
    gamma: float = Field(0.99, ge=0, lt=1)
    reward_mode: Literal["learned", "analytic"] = "learned"
    pin_elite: Literal["trajectory", "step"] = "trajectory"

    @model_validator(mode="after")
    def _horizons(self):
        if self.h_min > self.h_max:
            raise ValueError("h_min must not exceed h_max")
        return self

    def build(self) -> MprConfig:
        return MprConfig(**self.model_dump())


class SacSettings(_Strict):
    hidden: list[int] = [64, 64]
    lr_policy: float = Field(3e-4, gt=0)
    lr_q: float = Field(3e-4, gt=0)
    lr_v: float = Field(3e-4, gt=0)
    gamma: float = Field(0.99, ge=0, lt=1)
    tau: float = Field(0.005, gt=0, le=1)
    alpha: float = Field(0.2, gt=0)
    auto_alpha: bool = False
    batch_size: int = Field(256, ge=1)

    def build(self) -> SacConfig:
        d = self.model_dump(exclude={"batch_size"})
        d["hidden"] = tuple(d["hidden"])
        return SacConfig(**d)


class ModelSettings(_Strict):
    dynamics: Literal["ensemble", "analytic"] = "ensemble"  # analytic plugs in the true simulator
    n_members: int = Field(7, ge=1)
    n_elites: int = Field(5, ge=1)
    hidden: list[int] = [128, 128]
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(256, ge=1)
    patience: int = Field(5, ge=1)
    log_std_bounds: tuple[float, float] = (-10.0, 2.0)
    train_epochs: int = Field(20, ge=1)  # N in the outer loop
    train_freq: int = Field(250, ge=1)  # env steps between model refits
    min_transitions: int = Field(250, ge=1)

    @model_validator(mode="after")
    def _elites(self):
        if self.n_elites > self.n_members:
            raise ValueError("n_elites must not exceed n_members")
        return self


class ExperimentConfig(_Strict):
    env_id: Literal["pendulum", "valve", "pointmass"] = "pendulum"
    algorithm: Literal["mopac", "sac_only", "mbrl_only"] = "mopac"
    total_epochs: int = Field(30, ge=0)
    env_steps_per_epoch: int = Field(1000, ge=1)
    model_rollout_batch: int = Field(10_000, ge=1)  # model transitions generated per epoch
    model_retain_epochs: int = Field(1, ge=1)
    gradient_steps: int = Field(20, ge=0)  # G, per environment step
    real_ratio: float = Field(0.05, ge=0, le=1)
    start_steps: int = Field(0, ge=0)  # uniform-random actions before the policy takes over
    warmup_steps: int = Field(256, ge=1)  # env transitions required before gradient steps
    eval_episodes: int = Field(5, ge=1)
    checkpoint_every: int = Field(5, ge=1)
    stop_return: Optional[float] = None  # end the run early once the evaluation mean reaches this
    seed: int = 0
    output_dir: str = "runs/default"
    mpr: MprSettings = MprSettings()
    sac: SacSettings = SacSettings()
    model: ModelSettings = ModelSettings()

    def dump_yaml(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False))

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        """Validate a mapping; an optional ``preset`` key supplies the base values."""
        data = dict(data or {})
        preset = data.pop("preset", None)
        try:
            if preset:
                if preset not in PRESETS:
                    raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
                data = _deep_merge(PRESETS[preset]().model_dump(), data)
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigurationError(_summarise(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
        return cls.from_dict(data)


def _summarise(exc: ValidationError) -> str:
    parts = [f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors()]
    return "invalid config: " + "; ".join(parts)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def robotic_preset() -> ExperimentConfig:
    """Valve toy with 50-step episodes, 5 episodes per epoch and horizons 2-5."""
    return ExperimentConfig(
        env_id="valve",
        total_epochs=40,
        env_steps_per_epoch=250,
        model_rollout_batch=2500,
        mpr=MprSettings(h_min=2, h_max=5),
        model=ModelSettings(train_freq=250),
    )


def smoke_preset() -> ExperimentConfig:
    """Tiny pendulum run used for determinism and accounting checks."""
    return ExperimentConfig(
        total_epochs=2,
        gradient_steps=1,
        model_rollout_batch=1000,
        eval_episodes=1,
        mpr=MprSettings(n_traj=16, h_min=2, h_max=4),
        sac=SacSettings(hidden=[32, 32], batch_size=64),
        model=ModelSettings(n_members=3, n_elites=2, hidden=[32, 32], train_epochs=2),
    )


PRESETS = {"default": ExperimentConfig, "robotic": robotic_preset, "smoke": smoke_preset}
