import hashlib
import json
import math

import numpy as np
import pytest

from mopac.config import ExperimentConfig
from mopac.envs import make_env
from mopac.errors import ContractViolation, TrainingDivergence
from mopac.sac import ActorCritic
from mopac.trainer import (
    METRICS_COLUMNS,
    OUTPUT_DIR_ENV,
    EvalStats,
    Trainer,
    evaluate,
    load_checkpoint,
    read_metrics,
    run_episodes,
    run_experiment,
    train_baseline,
    train_mopac,
)


def smoke(**over):
    return ExperimentConfig.from_dict({"preset": "smoke", **over})


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    return {
        "a": train_mopac(smoke(seed=3), root / "a"),
        "b": train_mopac(smoke(seed=3), root / "b"),
        "sac": train_baseline(smoke(algorithm="sac_only", seed=3), root / "sac"),
        "mbrl": train_baseline(smoke(algorithm="mbrl_only", seed=3), root / "mbrl"),
    }


@pytest.fixture(scope="module")
def init_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("init")
    run_experiment(smoke(total_epochs=0), out)
    return out / "checkpoint"


def file_digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- the training loop ------------------------------------------------------------------


def test_smoke_run_writes_two_rows_and_2000_steps(smoke_runs):
    result = smoke_runs["a"]
    rows = read_metrics(result.output_dir / "metrics.csv")
    assert len(rows) == 2
    assert rows[-1]["env_steps"] == 2000
    assert result.env_steps == 2000
    assert list(rows[0]) == METRICS_COLUMNS


def test_seeded_runs_are_bit_identical(smoke_runs):
    a = (smoke_runs["a"].output_dir / "metrics.csv").read_bytes()
    b = (smoke_runs["b"].output_dir / "metrics.csv").read_bytes()
    assert a == b
    for name in ("actor_critic.bin", "model.bin"):
        assert file_digest(smoke_runs["a"].output_dir / "checkpoint" / name) == file_digest(
            smoke_runs["b"].output_dir / "checkpoint" / name
        )


def test_every_algorithm_spends_the_same_budget(smoke_runs):
    steps = {k: [r["env_steps"] for r in read_metrics(smoke_runs[k].output_dir / "metrics.csv")] for k in ("a", "sac", "mbrl")}
    assert steps["a"] == steps["sac"] == steps["mbrl"] == [1000, 2000]


def test_sac_only_has_no_model_columns(smoke_runs):
    for row in read_metrics(smoke_runs["sac"].output_dir / "metrics.csv"):
        assert row["model_val_l2"] is None
        assert row["mpr_calls"] is None and row["mpr_transitions"] is None


def test_mpr_transitions_equal_calls_times_horizon(smoke_runs):
    cfg = smoke()
    refits = cfg.env_steps_per_epoch // cfg.model.train_freq
    quota = round(cfg.model_rollout_batch * cfg.model.train_freq / cfg.env_steps_per_epoch)
    for row in read_metrics(smoke_runs["a"].output_dir / "metrics.csv"):
        h = row["mpr_horizon"]
        assert row["mpr_transitions"] == row["mpr_calls"] * h
        assert row["mpr_calls"] == refits * math.ceil(quota / h)


def test_metrics_are_finite_and_steps_monotone(smoke_runs):
    for run in smoke_runs.values():
        rows = read_metrics(run.output_dir / "metrics.csv")
        assert all(b["env_steps"] > a["env_steps"] for a, b in zip(rows, rows[1:]))
        for row in rows:
            assert all(v is None or math.isfinite(v) for v in row.values())


def test_run_manifest_and_config_are_written(smoke_runs):
    out = smoke_runs["a"].output_dir
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["status"] == "ok" and manifest["env_steps"] == 2000 and manifest["epochs"] == 2
    assert ExperimentConfig.load(out / "config.yaml") == smoke(seed=3)
    assert len((out / "timing.csv").read_text().splitlines()) == 3


def test_zero_epochs_writes_only_initialisation_artifacts(init_checkpoint):
    out = init_checkpoint.parent
    assert sorted(p.name for p in out.iterdir()) == ["checkpoint", "config.yaml", "metrics.csv", "run.json", "timing.csv"]
    assert read_metrics(out / "metrics.csv") == []
    assert json.loads((init_checkpoint / "meta.json").read_text())["env_steps"] == 0


def test_output_dir_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "from_env"))
    trainer = Trainer(smoke(total_epochs=0, output_dir=str(tmp_path / "from_config")))
    assert trainer.out == tmp_path / "from_env"
    assert Trainer(smoke(total_epochs=0), tmp_path / "explicit").out == tmp_path / "explicit"


def test_failure_checkpoints_last_good_state(tmp_path, monkeypatch):
    calls = {"n": 0}
    original = ActorCritic.update

    def flaky(self, batch, rng):
        calls["n"] += 1
        if calls["n"] > 1200:
            raise TrainingDivergence("non-finite q1 loss")
        return original(self, batch, rng)

    monkeypatch.setattr(ActorCritic, "update", flaky)
    with pytest.raises(TrainingDivergence):
        train_baseline(smoke(algorithm="sac_only"), tmp_path)
    manifest = json.loads((tmp_path / "run.json").read_text())
    assert manifest["status"] == "failed" and manifest["error"]["type"] == "training_divergence"
    assert json.loads((tmp_path / "checkpoint" / "meta.json").read_text())["epoch"] == 1
    assert len(read_metrics(tmp_path / "metrics.csv")) == 1  # the finished epoch survived
    ActorCritic.load(tmp_path / "checkpoint" / "actor_critic.bin")


def test_mopac_is_not_a_baseline():
    with pytest.raises(ContractViolation):
        train_baseline(smoke())


def test_model_based_control_beats_random_with_a_perfect_model(tmp_path):
    env = make_env("pendulum")
    rng = np.random.default_rng(0)
    random_mean = np.mean(run_episodes(env, lambda o: rng.uniform(-2, 2, 1), 20, range(20)))
    cfg = ExperimentConfig.from_dict(
        {
            "algorithm": "mbrl_only",
            "model": {"dynamics": "analytic"},
            "total_epochs": 5,
            "eval_episodes": 3,
            "gradient_steps": 1,
            "sac": {"batch_size": 64},
            "mpr": {"h_min": 10, "h_max": 10},
            "stop_return": float(random_mean),
        }
    )
    result = train_baseline(cfg, tmp_path)
    assert result.status == "stopped_early"
    assert result.metrics[-1]["eval_return_mean"] > random_mean


# --- evaluation ------------------------------------------------------------------


def test_single_episode_has_zero_std(init_checkpoint):
    stats = evaluate(init_checkpoint, n_episodes=1)
    assert stats.std == 0.0
    assert stats.ci95 == (stats.mean, stats.mean)


def test_random_init_policy_return_band(init_checkpoint):
    stats = evaluate(init_checkpoint, n_episodes=100)
    assert -1700 <= stats.mean <= -1000


def test_evaluation_is_pure(smoke_runs):
    ckpt = smoke_runs["a"].output_dir / "checkpoint"
    before = {p.name: file_digest(p) for p in ckpt.iterdir()}
    first = evaluate(ckpt, n_episodes=2)
    assert {p.name: file_digest(p) for p in ckpt.iterdir()} == before
    assert evaluate(ckpt, n_episodes=2).returns == first.returns


def test_trainer_evaluation_leaves_parameters_alone(tmp_path):
    trainer = Trainer(smoke(total_epochs=0), tmp_path)
    params = [p.copy() for net in trainer.ac.nets.values() for p in net.params]
    n_env = len(trainer.d_env)
    trainer.evaluate_policy(2)
    assert all(np.array_equal(a, b) for a, b in zip(params, [p for net in trainer.ac.nets.values() for p in net.params]))
    assert len(trainer.d_env) == n_env


def test_dimension_mismatch(init_checkpoint):
    with pytest.raises(ContractViolation):
        evaluate(init_checkpoint, env_id="valve")


def test_checkpoint_loads(smoke_runs):
    ac, model, meta = load_checkpoint(smoke_runs["a"].output_dir / "checkpoint")
    assert meta["epoch"] == 2 and meta["algorithm"] == "mopac"
    assert model is not None and model.trained
    assert ac.state_dim == 3


def test_eval_stats_interval():
    stats = EvalStats.from_returns([1.0, 2.0, 3.0])
    assert stats.mean == 2.0 and stats.std == pytest.approx(1.0)
    lo, hi = stats.ci95
    assert lo < 2.0 < hi and hi - 2.0 == pytest.approx(2.0 - lo)
