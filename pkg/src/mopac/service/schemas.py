"""Request and response bodies for the HTTP API."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field


class ErrorBody(BaseModel):
    type: str
    message: str


class ErrorRecord(BaseModel):
    """Every failure, from any endpoint, is reported in this shape."""

    error: ErrorBody


class Health(BaseModel):
    status: str = "ok"
    version: str


class TrainRequest(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)  # ExperimentConfig fields, optionally with a preset key
    seed: Optional[int] = None
    output_dir: Optional[str] = None
    wait: bool = False  # block until the run finishes instead of returning at once

    model_config = {
        "json_schema_extra": {
            "examples": [{"config": {"preset": "smoke"}, "seed": 3, "wait": True}]
        }
    }


class RunStatus(BaseModel):
    run_id: str
    status: Literal["pending", "running", "ok", "stopped_early", "failed"]
    algorithm: str
    env_id: str
    seed: int
    output_dir: str
    epochs_done: int = 0
    env_steps: int = 0
    last_metrics: Optional[dict[str, Any]] = None
    error: Optional[ErrorBody] = None


class EvaluateRequest(BaseModel):
    checkpoint: str
    episodes: int = Field(5, ge=1)
    env_id: Optional[str] = None
    seed: int = 0


class EvaluateResponse(BaseModel):
    mean: float
    std: float
    ci95_low: float
    ci95_high: float
    returns: list[float]


class TabularMdpBody(BaseModel):
    P: list[list[list[float]]]
    R: list[list[float]]
    gamma: float
    r_max: Optional[float] = None


class ScenarioBody(BaseModel):
    mdp: TabularMdpBody
    epsilon_f: float = Field(ge=0)
    epsilon_v: float = Field(ge=0)
    horizon: int = Field(ge=1)
    epsilon_pi: float = Field(0.0, ge=0)
    seed: int = 0


class GenerateSpec(BaseModel):
    count: int = Field(200, ge=1)
    seed: int = 0
    max_states: int = Field(8, ge=2)
    max_actions: int = Field(4, ge=2)
    max_horizon: int = Field(4, ge=1)
    max_eps_f: float = Field(0.3, ge=0, le=1)
    max_eps_v: float = Field(1.0, ge=0)


class SweepRequest(BaseModel):
    scenarios: Optional[list[ScenarioBody]] = None
    generate: Optional[GenerateSpec] = None


class BoundRow(BaseModel):
    seed: int
    n_states: int
    n_actions: int
    gamma: float
    H: int
    eps_f: float
    eps_v: float
    gap: float
    bound_eq2: float
    bound_eq3: float
    satisfied: bool


class SweepResponse(BaseModel):
    rows: list[BoundRow]
    satisfied: int
    total: int


class WeightsRequest(BaseModel):
    costs: list[float] = Field(min_length=1)
    lam: float = Field(1.0, gt=0)


class WeightsResponse(BaseModel):
    weights: list[float]
    ess: float
