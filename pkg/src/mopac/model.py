"""Probabilistic ensemble dynamics model with elite selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approx import AdamState, DenseNet, GaussianHead, load_nets, save_nets, sgd_step
from .errors import ConfigurationError, ContractViolation, InsufficientData, RolloutAborted, TrainingDivergence
from .replay import Batch, ReplayBuffer

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class Normalizer:
    def __init__(self, dim: int, min_std: float = 1e-6):
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)
        self.min_std = min_std

    def fit(self, x: np.ndarray) -> None:
        self.mean = x.mean(axis=0)
        self.std = np.maximum(x.std(axis=0), self.min_std)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class ModelTrainReport:
    train_nll: list[float]
    val_l2: list[float]
    elites: list[int]
    epochs: int
    history: list[list[float]] = field(default_factory=list)  # per-epoch validation L2 per member

    @property
    def elite_val_l2(self) -> float:
        return float(np.mean([self.val_l2[i] for i in self.elites]))


def select_elites(val_losses, k: int) -> list[int]:
    """Indices of the ``k`` smallest losses; ties go to the lower index."""
    order = np.argsort(np.asarray(val_losses, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:k])


class EnsembleModel:
    """``n_members`` Gaussian nets mapping ``(s, a)`` to ``(delta_s, r)``."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        n_members: int = 7,
        n_elites: int = 5,
        hidden: tuple[int, ...] = (128, 128),
        activation: str = "relu",
        lr: float = 1e-3,
        batch_size: int = 256,
        log_std_bounds: tuple[float, float] = (-10.0, 2.0),
        patience: int = 5,
        holdout: float = 0.2,
        max_holdout: int = 5000,
        min_transitions: int = 250,
        rng: np.random.Generator | int | None = None,
    ):
        if not 1 <= n_elites <= n_members:
            raise ContractViolation("need 1 <= n_elites <= n_members")
        rng = np.random.default_rng(rng)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.out_dim = state_dim + 1
        self.n_elites = n_elites
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.holdout = holdout
        self.max_holdout = max_holdout
        self.min_transitions = min_transitions
        sizes = [state_dim + action_dim, *hidden, 2 * self.out_dim]
        self.members = [
            GaussianHead(DenseNet.create(sizes, rng, hidden=activation), self.out_dim, log_std_bounds)
            for _ in range(n_members)
        ]
        self.optims = [AdamState() for _ in range(n_members)]
        self.normalizer = Normalizer(state_dim + action_dim)
        self.elite_mask = np.zeros(n_members, dtype=bool)
        self.trained = False

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def elites(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.elite_mask)]

    def set_elites(self, val_losses) -> list[int]:
        elites = select_elites(val_losses, self.n_elites)
        self.elite_mask[:] = False
        self.elite_mask[elites] = True
        return elites

    def _inputs(self, states, actions) -> np.ndarray:
        return self.normalizer(np.concatenate([states, actions], axis=-1))

    def member_forward(self, member: int, states, actions) -> tuple[np.ndarray, np.ndarray]:
        """Mean and log-std of ``(delta_s, r)`` for one member."""
        return self.members[member].forward(self._inputs(states, actions))

    # --- training -------------------------------------------------------------

    def _nll_step(self, m: int, x: np.ndarray, y: np.ndarray) -> float:
        head = self.members[m]
        mean, log_std, cache = head.forward_cached(x)
        inv_var = np.exp(-2.0 * log_std)
        err = mean - y
        n = err.size
        nll = float(np.sum(0.5 * err**2 * inv_var + log_std) / n + 0.5 * np.log(2 * np.pi))
        if not np.isfinite(nll):
            raise TrainingDivergence(f"ensemble member {m}: non-finite NLL")
        d_mean = err * inv_var / n
        d_log_std = (1.0 - err**2 * inv_var) / n
        grads, _ = head.backward_cached(cache, d_mean, d_log_std, input_grad=False)
        sgd_step(head.net, grads, self.lr, self.optims[m])
        return nll

    def _val_l2(self, m: int, x: np.ndarray, y: np.ndarray) -> float:
        mean, _ = self.members[m].forward(x)
        return float(np.mean((mean - y) ** 2))

    def train(self, data: ReplayBuffer | Batch, epochs: int, rng: np.random.Generator) -> ModelTrainReport:
        """Fit every member on its own bootstrap resample by Gaussian NLL.

        A random holdout split (``holdout`` fraction, at most ``max_holdout``
        rows) scores members by mean-prediction L2; each member keeps its best
        validation snapshot, training stops early after ``patience`` epochs
        without a 1% improvement, and the ``n_elites`` best become elites.
        """
        batch = data.all() if isinstance(data, ReplayBuffer) else data
        n = len(batch)
        if n < self.min_transitions:
            raise InsufficientData(f"model training needs {self.min_transitions} transitions, have {n}")
        x_raw = np.concatenate([batch.states, batch.actions], axis=1)
        y = np.concatenate([batch.next_states - batch.states, batch.rewards[:, None]], axis=1)
        self.normalizer.fit(x_raw)
        x = self.normalizer(x_raw)

        perm = rng.permutation(n)
        n_val = min(int(round(self.holdout * n)), self.max_holdout)
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        x_val, y_val = (x[val_idx], y[val_idx]) if n_val else (x[tr_idx], y[tr_idx])
        n_tr = len(tr_idx)
        boots = [tr_idx[rng.integers(0, n_tr, size=n_tr)] for _ in self.members]

        best = [self._val_l2(m, x_val, y_val) for m in range(self.n_members)]
        snapshots = [h.net.copy() for h in self.members]
        train_nll = [float("nan")] * self.n_members
        history = []
        stale = 0
        epochs_run = 0
        for _ in range(epochs):
            epochs_run += 1
            for m in range(self.n_members):
                idx = boots[m][rng.permutation(n_tr)]
                losses = []
                for start in range(0, n_tr, self.batch_size):
                    j = idx[start : start + self.batch_size]
                    losses.append(self._nll_step(m, x[j], y[j]))
                train_nll[m] = float(np.mean(losses))
            val = [self._val_l2(m, x_val, y_val) for m in range(self.n_members)]
            history.append(val)
            improved = False
            for m, v in enumerate(val):
                if v <= best[m]:
                    improved = improved or (best[m] - v) > 0.01 * best[m]
                    best[m] = v
                    snapshots[m] = self.members[m].net.copy()
            stale = 0 if improved else stale + 1
            if stale >= self.patience:
                break
        for m in range(self.n_members):
            self.members[m].net = snapshots[m]
        elites = self.set_elites(best)
        self.trained = True
        log.debug("model trained %d epochs, elite val L2 %.3g", epochs_run, np.mean([best[i] for i in elites]))
        return ModelTrainReport(train_nll, best, elites, epochs_run, history)

    # --- prediction -----------------------------------------------------------

    def sample_elites(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.elites)[rng.integers(0, self.n_elites, size=n)]

    def predict(
        self,
        states,
        actions,
        rng: np.random.Generator,
        elite_idx=None,
        deterministic: bool = False,
        reward_fn: RewardFn | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Sample ``(next_state, reward)`` from one elite per row.

        ``elite_idx`` pins the member (an int, or one member index per row);
        otherwise an elite is drawn uniformly per row. ``reward_fn`` replaces
        the learned reward channel with an analytic one.
        """
        if not self.trained:
            raise ContractViolation("predict() called on an untrained model")
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        n = len(states)
        if elite_idx is None:
            members = self.sample_elites(n, rng)
        else:
            members = np.broadcast_to(np.asarray(elite_idx), (n,))
        x = self._inputs(states, actions)
        out = np.empty((n, self.out_dim))
        noise = None if deterministic else rng.standard_normal((n, self.out_dim))
        for m in np.unique(members):
            rows = members == m
            mean, log_std = self.members[m].forward(x[rows])
            out[rows] = mean if deterministic else mean + np.exp(log_std) * noise[rows]
        if not np.all(np.isfinite(out)):
            raise RolloutAborted("ensemble produced non-finite predictions")
        next_states = states + out[:, : self.state_dim]
        rewards = out[:, self.state_dim]
        if reward_fn is not None:
            rewards = np.asarray(reward_fn(states, actions, next_states), dtype=np.float64)
        return next_states, rewards

    # --- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "ensemble",
            "version": CHECKPOINT_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "n_elites": self.n_elites,
            "log_std_bounds": list(self.members[0].log_std_bounds),
            "normalizer_mean": self.normalizer.mean.tolist(),
            "normalizer_std": self.normalizer.std.tolist(),
            "elite_mask": self.elite_mask.tolist(),
            "trained": self.trained,
        }
        save_nets(path, {f"member{i}": h.net for i, h in enumerate(self.members)}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleModel":
        nets, meta = load_nets(path)
        if meta.get("kind") != "ensemble" or meta.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: not a version-{CHECKPOINT_VERSION} ensemble checkpoint")
        members = [nets[f"member{i}"] for i in range(len(nets))]
        model = cls(meta["state_dim"], meta["action_dim"], len(members), meta["n_elites"], hidden=(1,))
        model.members = [GaussianHead(n, model.out_dim, tuple(meta["log_std_bounds"])) for n in members]
        model.optims = [AdamState() for _ in members]
        model.normalizer.mean = np.array(meta["normalizer_mean"])
        model.normalizer.std = np.array(meta["normalizer_std"])
        model.elite_mask = np.array(meta["elite_mask"], dtype=bool)
        model.trained = meta["trained"]
        return model


class AnalyticModel:
    """Wraps an environment's true dynamics behind the ensemble interface."""

    n_members = 1
    n_elites = 1
    elites = [0]
    trained = True

    def __init__(self, env):
        self.env = env
        self.state_dim = env.spec.state_dim
        self.action_dim = env.spec.action_dim

    def sample_elites(self, n, rng):
        return np.zeros(n, dtype=int)

    def predict(self, states, actions, rng=None, elite_idx=None, deterministic=False, reward_fn=None):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        next_states = self.env.dynamics(states, actions)
        fn = reward_fn or self.env.reward_fn
        return next_states, np.asarray(fn(states, actions, next_states), dtype=np.float64)


def resolve_reward_fn(mode: str, env) -> RewardFn | None:
    """``"learned"`` uses the ensemble's reward channel; ``"analytic"`` the env's reward."""
    if mode == "learned":
        return None
    if mode == "analytic":
        if env is None or not getattr(env, "has_reward_fn", False):
            raise ConfigurationError("analytic reward requested but the environment exposes no reward function")
        return env.reward_fn
    raise ConfigurationError(f"unknown reward mode {mode!r}")
