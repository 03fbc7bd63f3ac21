"""HTTP front end: training runs, checkpoint evaluation and the tabular bound checks.

Training is long-running, so ``POST /runs`` returns immediately and the run
proceeds on a background thread; poll ``GET /runs/{run_id}``.  Pass
``"wait": true`` to block instead (the CLI does this when running in-process).
"""

from __future__ import annotations

import logging
import threading
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..bounds import check_mpc_bound, load_scenarios
from ..config import ExperimentConfig
from ..errors import ConfigurationError, ContractViolation, MopacError, ScenarioSizeError
from ..mpr import importance_weights
from ..trainer import Trainer, evaluate
from .schemas import (
    BoundRow,
    ErrorRecord,
    EvaluateRequest,
    EvaluateResponse,
    Health,
    RunStatus,
    ScenarioBody,
    SweepRequest,
    SweepResponse,
    TrainRequest,
    WeightsRequest,
    WeightsResponse,
)

log = logging.getLogger(__name__)

CLIENT_ERRORS = (ConfigurationError, ContractViolation, ScenarioSizeError)


def error_record(kind: str, message: str) -> dict:
    return ErrorRecord(error={"type": kind, "message": message}).model_dump()


class _Run:
    def __init__(self, run_id: str, trainer: Trainer):
        self.run_id = run_id
        self.trainer = trainer
        self.status = "pending"
        self.error: dict | None = None

    def execute(self) -> None:
        self.status = "running"
        try:
            result = self.trainer.run()
            self.status = result.status
        except MopacError as exc:
            self.status = "failed"
            self.error = {"type": exc.code, "message": str(exc)}
        except Exception as exc:  # keep the server alive; the record says what happened
            log.exception("run %s crashed", self.run_id)
            self.status = "failed"
            self.error = {"type": "internal_error", "message": repr(exc)}

    def describe(self) -> RunStatus:
        cfg = self.trainer.cfg
        metrics = self.trainer.result.metrics if self.trainer.result else []
        return RunStatus(
            run_id=self.run_id,
            status=self.status,
            algorithm=cfg.algorithm,
            env_id=cfg.env_id,
            seed=cfg.seed,
            output_dir=str(self.trainer.out),
            epochs_done=len(metrics),
            env_steps=self.trainer.env_steps,
            last_metrics=metrics[-1] if metrics else None,
            error=self.error,
        )


def create_app() -> FastAPI:
    app = FastAPI(title="mopac", version=__version__)
    runs: dict[str, _Run] = {}
    lock = threading.Lock()

    @app.exception_handler(MopacError)
    async def _mopac_error(request: Request, exc: MopacError):
        status = 422 if isinstance(exc, CLIENT_ERRORS) else 500
        return JSONResponse(status_code=status, content=error_record(exc.code, str(exc)))

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        msg = "; ".join(f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors())
        return JSONResponse(status_code=422, content=error_record("invalid_request", msg))

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.post("/runs", response_model=RunStatus, status_code=201)
    def start_run(req: TrainRequest):
        cfg = ExperimentConfig.from_dict(req.config)
        if req.seed is not None:
            cfg = cfg.model_copy(update={"seed": req.seed})
        run = _Run(uuid.uuid4().hex[:12], Trainer(cfg, req.output_dir))
        with lock:
            runs[run.run_id] = run
        if req.wait:
            run.execute()
        else:
            threading.Thread(target=run.execute, name=f"run-{run.run_id}", daemon=True).start()
        return run.describe()

    @app.get("/runs", response_model=list[RunStatus])
    def list_runs():
        with lock:
            return [r.describe() for r in runs.values()]

    @app.get("/runs/{run_id}", response_model=RunStatus, responses={404: {"model": ErrorRecord}})
    def get_run(run_id: str):
        run = runs.get(run_id)
        if run is None:
            return JSONResponse(status_code=404, content=error_record("not_found", f"no run {run_id!r}"))
        return run.describe()

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate_checkpoint(req: EvaluateRequest):
        try:
            ev = evaluate(req.checkpoint, req.env_id, req.episodes, req.seed)
        except FileNotFoundError as exc:
            raise ContractViolation(f"checkpoint not loadable: {exc}") from exc
        return EvaluateResponse(mean=ev.mean, std=ev.std, ci95_low=ev.ci95[0], ci95_high=ev.ci95[1], returns=ev.returns)

    @app.post("/bounds/check", response_model=BoundRow)
    def bounds_check(scenario: ScenarioBody):
        (s,) = load_scenarios([scenario.model_dump()])
        return BoundRow(**check_mpc_bound(s).row())

    @app.post("/bounds/sweep", response_model=SweepResponse)
    def bounds_sweep(req: SweepRequest):
        if (req.scenarios is None) == (req.generate is None):
            raise ConfigurationError("give exactly one of 'scenarios' or 'generate'")
        if req.generate is not None:
            scenarios = load_scenarios({"generate": req.generate.model_dump()})
        else:
            scenarios = load_scenarios([s.model_dump() for s in req.scenarios])
        rows = [BoundRow(**check_mpc_bound(s).row()) for s in scenarios]
        return SweepResponse(rows=rows, satisfied=sum(r.satisfied for r in rows), total=len(rows))

    @app.post("/mpr/weights", response_model=WeightsResponse)
    def mpr_weights(req: WeightsRequest):
        w = importance_weights(req.costs, req.lam)
        return WeightsResponse(weights=w.tolist(), ess=float(1.0 / np.sum(w**2)))

    return app


app = create_app()
