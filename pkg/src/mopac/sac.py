"""Soft actor-critic with a state-value network, twin Q critics and Polyak targets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approx import AdamState, DenseNet, GaussianHead, load_nets, polyak_update, save_nets, sgd_step
from .errors import ContractViolation, TrainingDivergence
from .replay import Batch

CHECKPOINT_VERSION = 1
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr_policy: float = 3e-4
    lr_q: float = 3e-4
    lr_v: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.2
    auto_alpha: bool = False
    lr_alpha: float = 3e-4
    target_entropy: float | None = None
    log_std_bounds: tuple[float, float] = (-20.0, 2.0)


def log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def _finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise TrainingDivergence(f"non-finite {name} loss")
    return float(value)


class ActorCritic:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        action_low,
        action_high,
        cfg: SacConfig | None = None,
        rng: np.random.Generator | int | None = None,
    ):
        cfg = cfg or SacConfig()
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.scale = (self.action_high - self.action_low) / 2.0
        self.center = (self.action_high + self.action_low) / 2.0
        h = list(cfg.hidden)
        self.policy = GaussianHead(
            DenseNet.create([state_dim, *h, 2 * action_dim], rng), action_dim, cfg.log_std_bounds
        )
        self.q1 = DenseNet.create([state_dim + action_dim, *h, 1], rng)
        self.q2 = DenseNet.create([state_dim + action_dim, *h, 1], rng)
        self.v = DenseNet.create([state_dim, *h, 1], rng)
        self.v_target = self.v.copy()
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.opt = {k: AdamState() for k in ("policy", "q1", "q2", "v")}
        self.log_alpha = float(np.log(cfg.alpha))
        self.target_entropy = -float(action_dim) if cfg.target_entropy is None else cfg.target_entropy
        self._alpha_state = AdamState()

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def nets(self) -> dict[str, DenseNet]:
        return {
            "policy": self.policy.net,
            "q1": self.q1,
            "q2": self.q2,
            "v": self.v,
            "v_target": self.v_target,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
        }

    # --- acting -----------------------------------------------------------------

    def _squash(self, u: np.ndarray) -> np.ndarray:
        return self.center + self.scale * np.tanh(u)

    def _log_prob_from(self, u, eps, log_std) -> np.ndarray:
        return np.sum(-0.5 * eps**2 - log_std - HALF_LOG_2PI - log_one_minus_tanh_sq(u) - np.log(self.scale), axis=-1)

    def sample_action(self, state, rng: np.random.Generator, deterministic: bool = False):
        """Return ``(action, log_prob)``; batched when ``state`` is 2-D."""
        mean, log_std = self.policy.forward(state)
        eps = np.zeros_like(mean) if deterministic else rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * eps
        return self._squash(u), self._log_prob_from(u, eps, log_std)

    def act(self, states, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        if deterministic or rng is None:
            mean, _ = self.policy.forward(states)
            return self._squash(mean)
        return self.sample_action(states, rng)[0]

    def log_prob(self, states, actions) -> np.ndarray:
        """Density of given (squashed, scaled) actions under the policy."""
        mean, log_std = self.policy.forward(states)
        unit = np.clip((np.asarray(actions) - self.center) / self.scale, -1 + 1e-15, 1 - 1e-15)
        u = np.arctanh(unit)
        eps = (u - mean) / np.exp(log_std)
        return self._log_prob_from(u, eps, log_std)

    def value(self, states) -> np.ndarray:
        return self.v.forward(states)[..., 0]

    def target_value(self, states) -> np.ndarray:
        return self.v_target.forward(states)[..., 0]

    def q_min(self, states, actions) -> np.ndarray:
        x = np.concatenate([states, actions], axis=-1)
        return np.minimum(self.q1.forward(x), self.q2.forward(x))[..., 0]

    # --- learning -----------------------------------------------------------------

    def update(self, batch: Batch | list, rng: np.random.Generator) -> dict[str, float]:
        """One gradient step on V, both Q critics and the policy, then Polyak targets."""
        if not isinstance(batch, Batch):
            batch = Batch.from_transitions(batch)
        s, a, r, s2, d = batch
        B = len(r)
        if B == 0:
            raise ContractViolation("empty batch")
        cfg = self.cfg
        alpha = self.alpha

        # Q critics regress onto r + gamma * V_target(s')
        y = (r + cfg.gamma * (1.0 - d) * self.target_value(s2))[:, None]
        sa = np.concatenate([s, a], axis=1)
        q_losses, q_grads = {}, {}
        for name, q in (("q1", self.q1), ("q2", self.q2)):
            pred, cache = q.forward_cached(sa)
            diff = pred - y
            q_losses[name] = _finite(name, 0.5 * np.mean(diff**2))
            q_grads[name], _ = q.backward_cached(cache, diff / B, input_grad=False)

        pol = self._policy_terms(s, rng.standard_normal((B, self.action_dim)), alpha)
        logp, qmin = pol["logp"], pol["qmin"]

        # V regresses onto min Q - alpha * log pi
        v_pred, vcache = self.v.forward_cached(s)
        v_diff = v_pred[:, 0] - (qmin - alpha * logp)
        v_loss = _finite("v", 0.5 * np.mean(v_diff**2))
        v_grads, _ = self.v.backward_cached(vcache, v_diff[:, None] / B, input_grad=False)

        pi_loss = _finite("policy", pol["loss"])
        pi_grads, _ = self.policy.backward_cached(pol["cache"], pol["d_mean"], pol["d_log_std"], input_grad=False)

        sgd_step(self.v, v_grads, cfg.lr_v, self.opt["v"])
        sgd_step(self.q1, q_grads["q1"], cfg.lr_q, self.opt["q1"])
        sgd_step(self.q2, q_grads["q2"], cfg.lr_q, self.opt["q2"])
        sgd_step(self.policy.net, pi_grads, cfg.lr_policy, self.opt["policy"])

        if cfg.auto_alpha:
            g = -float(np.mean(logp + self.target_entropy))
            st = self._alpha_state
            st.t += 1
            m = st.beta1 * (st.m[0] if st.m else 0.0) + (1 - st.beta1) * g
            v = st.beta2 * (st.v[0] if st.v else 0.0) + (1 - st.beta2) * g * g
            st.m, st.v = [m], [v]
            self.log_alpha -= cfg.lr_alpha * (m / (1 - st.beta1**st.t)) / (np.sqrt(v / (1 - st.beta2**st.t)) + st.eps)

        self.update_targets()
        return {
            "v_loss": v_loss,
            "q1_loss": q_losses["q1"],
            "q2_loss": q_losses["q2"],
            "pi_loss": pi_loss,
            "entropy": float(-np.mean(logp)),
            "alpha": self.alpha,
        }

    def _policy_terms(self, s, eps, alpha) -> dict:
        """Reparameterised policy objective ``E[alpha * log pi - min Q]`` and its output gradients."""
        B = len(s)
        mean, log_std, cache = self.policy.forward_cached(s)
        std = np.exp(log_std)
        u = mean + std * eps
        t = np.tanh(u)
        a_new = self.center + self.scale * t
        logp = self._log_prob_from(u, eps, log_std)
        sa_new = np.concatenate([s, a_new], axis=1)
        qn1, c1 = self.q1.forward_cached(sa_new)
        qn2, c2 = self.q2.forward_cached(sa_new)
        use1 = (qn1 <= qn2)[:, 0]
        qmin = np.where(use1, qn1[:, 0], qn2[:, 0])
        # the gradient of -min Q flows only through the smaller critic, row by row
        _, dx1 = self.q1.backward_cached(c1, np.where(use1, -1.0 / B, 0.0)[:, None], param_grads=False)
        _, dx2 = self.q2.backward_cached(c2, np.where(use1, 0.0, -1.0 / B)[:, None], param_grads=False)
        g_a = (dx1 + dx2)[:, self.state_dim :]
        g_u = g_a * self.scale * (1.0 - t * t)
        return {
            "loss": float(np.mean(alpha * logp - qmin)),
            "logp": logp,
            "qmin": qmin,
            "actions": a_new,
            "cache": cache,
            "d_mean": alpha * 2.0 * t / B + g_u,
            "d_log_std": alpha * (-1.0 + 2.0 * t * std * eps) / B + g_u * std * eps,
        }

    def policy_objective(self, states, eps, alpha: float | None = None) -> tuple[float, list]:
        """Policy loss for fixed unit noise ``eps`` and its gradient w.r.t. the policy parameters."""
        alpha = self.alpha if alpha is None else alpha
        pol = self._policy_terms(np.atleast_2d(states), np.atleast_2d(eps), alpha)
        grads, _ = self.policy.backward_cached(pol["cache"], pol["d_mean"], pol["d_log_std"], input_grad=False)
        return pol["loss"], grads

    def update_value_td(self, batch: Batch) -> dict[str, float]:
        """TD(0) regression of V onto ``r + gamma * V_target(s')`` (no actor, no critics)."""
        s, a, r, s2, d = batch
        y = r + self.cfg.gamma * (1.0 - d) * self.target_value(s2)
        pred, cache = self.v.forward_cached(s)
        diff = pred[:, 0] - y
        loss = _finite("v", 0.5 * np.mean(diff**2))
        grads, _ = self.v.backward_cached(cache, diff[:, None] / len(r), input_grad=False)
        sgd_step(self.v, grads, self.cfg.lr_v, self.opt["v"])
        polyak_update(self.v_target, self.v, self.cfg.tau)
        return {"v_loss": loss}

    def update_targets(self) -> None:
        tau = self.cfg.tau
        polyak_update(self.v_target, self.v, tau)
        polyak_update(self.q1_target, self.q1, tau)
        polyak_update(self.q2_target, self.q2, tau)

    # --- persistence ----------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "actor_critic",
            "version": CHECKPOINT_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "log_alpha": self.log_alpha,
            "config": {**self.cfg.__dict__, "hidden": list(self.cfg.hidden), "log_std_bounds": list(self.cfg.log_std_bounds)},
        }
        save_nets(path, self.nets, meta)

    @classmethod
    def load(cls, path: str | Path) -> "ActorCritic":
        nets, meta = load_nets(path)
        if meta.get("kind") != "actor_critic" or meta.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: not a version-{CHECKPOINT_VERSION} actor-critic checkpoint")
        c = dict(meta["config"])
        c["hidden"] = tuple(c["hidden"])
        c["log_std_bounds"] = tuple(c["log_std_bounds"])
        ac = cls(meta["state_dim"], meta["action_dim"], meta["action_low"], meta["action_high"], SacConfig(**c), rng=0)
        ac.policy = GaussianHead(nets["policy"], ac.action_dim, ac.cfg.log_std_bounds)
        for k in ("q1", "q2", "v", "v_target", "q1_target", "q2_target"):
            setattr(ac, k, nets[k])
        ac.log_alpha = meta["log_alpha"]
        return ac
