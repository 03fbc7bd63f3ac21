"""Outer training loop for MoPAC and the SAC-only / MBRL-only baselines, plus evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import ExperimentConfig
from .envs import Env, make_env
from .errors import ContractViolation, MopacError
from .model import AnalyticModel, EnsembleModel, resolve_reward_fn
from .mpr import anneal_horizon, run_mpr, simulate_batch, optimal_action_sequence
from .replay import MixedSampler, ReplayBuffer
from .sac import ActorCritic

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "MOPAC_OUTPUT_DIR"
METRICS_COLUMNS = [
    "epoch",
    "env_steps",
    "eval_return_mean",
    "eval_return_std",
    "train_return_mean",
    "train_episodes",
    "model_val_l2",
    "mpr_horizon",
    "mpr_calls",
    "mpr_transitions",
    "mpr_mean_cost",
    "mpr_ess",
    "v_loss",
    "q_loss",
    "pi_loss",
    "entropy",
]


@dataclass
class EvalStats:
    mean: float
    std: float
    ci95: tuple[float, float]
    returns: list[float]

    @classmethod
    def from_returns(cls, returns) -> "EvalStats":
        r = np.asarray(returns, dtype=np.float64)
        mean = float(r.mean())
        std = float(r.std(ddof=1)) if len(r) > 1 else 0.0
        half = float(stats.t.ppf(0.975, len(r) - 1) * std / math.sqrt(len(r))) if len(r) > 1 else 0.0
        return cls(mean, std, (mean - half, mean + half), r.tolist())


@dataclass
class RunResult:
    output_dir: Path
    metrics: list[dict] = field(default_factory=list)
    status: str = "ok"

    @property
    def env_steps(self) -> int:
        return self.metrics[-1]["env_steps"] if self.metrics else 0


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


class MetricsWriter:
    """Appends one CSV row per epoch and flushes immediately."""

    def __init__(self, path: Path):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_COLUMNS)

    def write(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c)) for c in METRICS_COLUMNS])


def _parse(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_metrics(path: str | Path) -> list[dict]:
    """Metrics rows with numbers parsed back; empty cells become ``None``."""
    with open(path, newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def run_episodes(env: Env, act, n_episodes: int, seeds) -> list[float]:
    returns = []
    for i in range(n_episodes):
        obs = env.reset(seed=int(seeds[i]))
        total, done = 0.0, False
        while not done:
            tr, truncated = env.step(act(obs))
            total += tr.reward
            obs = tr.next_state
            done = truncated or tr.done
        returns.append(total)
    return returns


class MpcController:
    """Receding-horizon control on the model: plan with rollouts, execute the first action."""

    def __init__(self, model, value_fn, mpr_cfg, spec, rng, reward_fn=None):
        self.model = model
        self.value_fn = value_fn
        self.cfg = mpr_cfg
        self.spec = spec
        self.rng = rng
        self.reward_fn = reward_fn
        self.horizon = mpr_cfg.h_min
        self.plan = None

    def reset(self) -> None:
        self.plan = None

    def prior(self) -> np.ndarray:
        prior = np.zeros((self.horizon, self.spec.action_dim)) + (self.spec.action_low + self.spec.action_high) / 2
        if self.plan is not None:
            shifted = np.concatenate([self.plan[1:], self.plan[-1:]])[: self.horizon]
            prior[: len(shifted)] = shifted
        return prior

    def __call__(self, obs) -> np.ndarray:
        rb = simulate_batch(
            obs,
            self.model,
            None,
            self.value_fn,
            self.horizon,
            self.cfg,
            self.rng,
            self.spec.action_low,
            self.spec.action_high,
            self.reward_fn,
            base_actions=self.prior(),
        )
        self.plan = optimal_action_sequence(rb, self.spec.action_low, self.spec.action_high)
        return self.plan[0]


class Trainer:
    """Runs one experiment end to end and writes its artifacts to ``output_dir``."""

    def __init__(self, cfg: ExperimentConfig, output_dir: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(output_dir) if output_dir is not None else resolve_output_dir(cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        seeds = np.random.SeedSequence(cfg.seed).spawn(8)
        self.rng_env, self.rng_act, self.rng_init, self.rng_model, self.rng_mpr, self.rng_replay, self.rng_update, self.rng_eval = (
            np.random.default_rng(s) for s in seeds
        )
        self.env = make_env(cfg.env_id)
        self.eval_env = make_env(cfg.env_id)
        spec = self.env.spec
        self.spec = spec
        self.ac = ActorCritic(spec.state_dim, spec.action_dim, spec.action_low, spec.action_high, cfg.sac.build(), self.rng_init)
        m = cfg.model
        self.model = None
        if cfg.algorithm != "sac_only" and m.dynamics == "analytic":
            self.model = AnalyticModel(self.env)
        elif cfg.algorithm != "sac_only":
            self.model = EnsembleModel(
                spec.state_dim,
                spec.action_dim,
                m.n_members,
                m.n_elites,
                tuple(m.hidden),
                lr=m.lr,
                batch_size=m.batch_size,
                log_std_bounds=tuple(m.log_std_bounds),
                patience=m.patience,
                min_transitions=m.min_transitions,
                rng=self.rng_init,
            )
        self.mpr_cfg = cfg.mpr.build()
        self.reward_fn = resolve_reward_fn(cfg.mpr.reward_mode, self.env)
        total_steps = max(1, cfg.total_epochs * cfg.env_steps_per_epoch)
        self.d_env = ReplayBuffer(total_steps, spec.state_dim, spec.action_dim)
        refits = max(1, cfg.env_steps_per_epoch // cfg.model.train_freq)
        self.d_model = ReplayBuffer(
            cfg.model_retain_epochs * (cfg.model_rollout_batch + refits * cfg.mpr.h_max), spec.state_dim, spec.action_dim
        )
        real_ratio = 1.0 if cfg.algorithm == "sac_only" else cfg.real_ratio
        self.sampler = MixedSampler(self.d_env, self.d_model, real_ratio)
        self.env_steps = 0
        self.result: RunResult | None = None
        self.controller = None
        if cfg.algorithm == "mbrl_only":
            self.controller = MpcController(self.model, self.ac.target_value, self.mpr_cfg, spec, self.rng_mpr, self.reward_fn)

    # --- pieces ------------------------------------------------------------------------------

    def _act(self, obs) -> np.ndarray:
        if self.env_steps < self.cfg.start_steps or (self.controller is not None and not self.model.trained):
            return self.rng_act.uniform(self.spec.action_low, self.spec.action_high)
        if self.controller is not None:
            return self.controller(obs)
        return self.ac.act(obs[None], self.rng_act)[0]

    def _refit_and_rollout(self, epoch: int, stats_: dict) -> None:
        cfg = self.cfg
        if isinstance(self.model, EnsembleModel):
            report = self.model.train(self.d_env, cfg.model.train_epochs, self.rng_model)
            stats_["model_val_l2"] = report.elite_val_l2
        H = anneal_horizon(epoch - 1, cfg.total_epochs, self.mpr_cfg)
        stats_["mpr_horizon"] = H
        if self.controller is not None:
            self.controller.horizon = H
            return
        quota = max(1, round(cfg.model_rollout_batch * cfg.model.train_freq / cfg.env_steps_per_epoch))
        M = math.ceil(quota / H)
        starts = self.d_env.sample(M, self.rng_mpr).states
        res = run_mpr(
            starts,
            self.model,
            lambda s, rng: self.ac.act(s, rng),
            self.ac.target_value,
            H,
            self.mpr_cfg,
            self.rng_mpr,
            self.spec.action_low,
            self.spec.action_high,
            self.reward_fn,
        )
        self.d_model.push_batch(res.batch)
        stats_["mpr_calls"] += M
        stats_["mpr_transitions"] += len(res.batch)
        stats_["_costs"].append(res.mean_cost)
        stats_["_ess"].append(res.ess)

    def _gradient_steps(self, losses: list) -> None:
        cfg = self.cfg
        if len(self.d_env) < cfg.warmup_steps:
            return
        for _ in range(cfg.gradient_steps):
            batch = self.sampler.sample_batch(cfg.sac.batch_size, self.rng_replay)
            if cfg.algorithm == "mbrl_only":
                losses.append(self.ac.update_value_td(batch))
            else:
                losses.append(self.ac.update(batch, self.rng_update))

    def evaluate_policy(self, n_episodes: int) -> EvalStats:
        seeds = self.rng_eval.integers(0, 2**31 - 1, size=n_episodes)
        if self.controller is not None:
            if not self.model.trained:
                act = lambda obs: (self.spec.action_low + self.spec.action_high) / 2  # noqa: E731
            else:
                ctrl = MpcController(self.model, self.ac.target_value, self.mpr_cfg, self.spec, self.rng_eval, self.reward_fn)
                ctrl.horizon = self.controller.horizon
                act = ctrl
            return EvalStats.from_returns(run_episodes(self.eval_env, act, n_episodes, seeds))
        return EvalStats.from_returns(
            run_episodes(self.eval_env, lambda o: self.ac.act(o[None], deterministic=True)[0], n_episodes, seeds)
        )

    def save_checkpoint(self, epoch: int) -> Path:
        path = self.out / "checkpoint"
        tmp = self.out / "checkpoint.tmp"
        tmp.mkdir(exist_ok=True)
        self.ac.save(tmp / "actor_critic.bin")
        if isinstance(self.model, EnsembleModel) and self.model.trained:
            self.model.save(tmp / "model.bin")
        meta = {
            "epoch": epoch,
            "env_steps": self.env_steps,
            "env_id": self.cfg.env_id,
            "algorithm": self.cfg.algorithm,
            "config": self.cfg.model_dump(mode="json"),
        }
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2))
        if path.exists():
            for f in path.iterdir():
                f.unlink()
            path.rmdir()
        tmp.rename(path)
        return path

    # --- loop -------------------------------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        self.cfg.dump_yaml(self.out / "config.yaml")
        manifest = {"algorithm": cfg.algorithm, "env_id": cfg.env_id, "seed": cfg.seed, "status": "running"}
        (self.out / "run.json").write_text(json.dumps(manifest, indent=2))
        writer = MetricsWriter(self.out / "metrics.csv")
        timing_path = self.out / "timing.csv"
        timing_path.write_text("epoch,wall_time\n")
        result = self.result = RunResult(self.out)
        t0 = time.perf_counter()
        obs = self.env.reset(seed=int(self.rng_env.integers(2**31 - 1)))
        if self.controller is not None:
            self.controller.reset()
        ep_return = 0.0
        epoch = 0
        try:
            for epoch in range(1, cfg.total_epochs + 1):
                st = {"mpr_calls": 0, "mpr_transitions": 0, "_costs": [], "_ess": [], "model_val_l2": None, "mpr_horizon": None}
                losses: list[dict] = []
                train_returns: list[float] = []
                for _ in range(cfg.env_steps_per_epoch):
                    tr, truncated = self.env.step(self._act(obs))
                    self.d_env.push(tr)
                    self.env_steps += 1
                    ep_return += tr.reward
                    obs = tr.next_state
                    if truncated or tr.done:
                        train_returns.append(ep_return)
                        ep_return = 0.0
                        obs = self.env.reset(seed=int(self.rng_env.integers(2**31 - 1)))
                        if self.controller is not None:
                            self.controller.reset()
                    if (
                        self.model is not None
                        and self.env_steps % cfg.model.train_freq == 0
                        and len(self.d_env) >= cfg.model.min_transitions
                    ):
                        self._refit_and_rollout(epoch, st)
                    self._gradient_steps(losses)
                ev = self.evaluate_policy(cfg.eval_episodes)
                row = {
                    "epoch": epoch,
                    "env_steps": self.env_steps,
                    "eval_return_mean": ev.mean,
                    "eval_return_std": ev.std,
                    "train_return_mean": float(np.mean(train_returns)) if train_returns else None,
                    "train_episodes": len(train_returns),
                    "model_val_l2": st["model_val_l2"],
                    "mpr_horizon": st["mpr_horizon"],
                    "mpr_calls": st["mpr_calls"] if cfg.algorithm == "mopac" else None,
                    "mpr_transitions": st["mpr_transitions"] if cfg.algorithm == "mopac" else None,
                    "mpr_mean_cost": float(np.mean(st["_costs"])) if st["_costs"] else None,
                    "mpr_ess": float(np.mean(st["_ess"])) if st["_ess"] else None,
                }
                for key in ("v_loss", "pi_loss", "entropy"):
                    vals = [l[key] for l in losses if key in l]
                    row[key] = float(np.mean(vals)) if vals else None
                q = [0.5 * (l["q1_loss"] + l["q2_loss"]) for l in losses if "q1_loss" in l]
                row["q_loss"] = float(np.mean(q)) if q else None
                writer.write(row)
                with open(timing_path, "a") as f:
                    f.write(f"{epoch},{time.perf_counter() - t0:.3f}\n")
                result.metrics.append(row)
                log.info("epoch %d steps %d eval %.1f", epoch, self.env_steps, ev.mean)
                if epoch % cfg.checkpoint_every == 0:
                    self.save_checkpoint(epoch)
                if cfg.stop_return is not None and ev.mean >= cfg.stop_return:
                    result.status = "stopped_early"
                    break
        except MopacError as exc:
            self.save_checkpoint(epoch - 1)
            manifest.update(status="failed", error={"type": exc.code, "message": str(exc)})
            (self.out / "run.json").write_text(json.dumps(manifest, indent=2))
            raise
        self.save_checkpoint(epoch)
        manifest.update(status=result.status, epochs=len(result.metrics), env_steps=self.env_steps)
        (self.out / "run.json").write_text(json.dumps(manifest, indent=2))
        return result


def train_mopac(cfg: ExperimentConfig, output_dir=None) -> RunResult:
    if cfg.algorithm != "mopac":
        cfg = cfg.model_copy(update={"algorithm": "mopac"})
    return Trainer(cfg, output_dir).run()


def train_baseline(cfg: ExperimentConfig, output_dir=None) -> RunResult:
    if cfg.algorithm not in ("sac_only", "mbrl_only"):
        raise ContractViolation(f"{cfg.algorithm!r} is not a baseline")
    return Trainer(cfg, output_dir).run()


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> RunResult:
    return Trainer(cfg, output_dir).run()


def load_checkpoint(path: str | Path):
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    ac = ActorCritic.load(path / "actor_critic.bin")
    model = EnsembleModel.load(path / "model.bin") if (path / "model.bin").exists() else None
    return ac, model, meta


def evaluate(checkpoint: str | Path, env_id: str | None = None, n_episodes: int = 5, seed: int = 0) -> EvalStats:
    """Roll out the checkpointed controller; deterministic (mean) actions for actor-based runs."""
    ac, model, meta = load_checkpoint(checkpoint)
    env_id = env_id or meta["env_id"]
    env = make_env(env_id)
    if env.spec.state_dim != ac.state_dim or env.spec.action_dim != ac.action_dim:
        raise ContractViolation(f"checkpoint dimensions do not match environment {env_id!r}")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_episodes)
    if meta["algorithm"] == "mbrl_only":
        cfg = ExperimentConfig.model_validate(meta["config"])
        if cfg.model.dynamics == "analytic":
            model = AnalyticModel(env)
        if model is None:
            raise ContractViolation("mbrl_only checkpoint has no trained model")
        ctrl = MpcController(model, ac.target_value, cfg.mpr.build(), env.spec, rng, resolve_reward_fn(cfg.mpr.reward_mode, env))
        ctrl.horizon = cfg.mpr.h_max
        return EvalStats.from_returns(run_episodes(env, ctrl, n_episodes, seeds))
    return EvalStats.from_returns(run_episodes(env, lambda o: ac.act(o[None], deterministic=True)[0], n_episodes, seeds))
