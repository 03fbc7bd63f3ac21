"""Model predictive rollouts: importance-weighted trajectory optimisation in the learned model.

A single call starts from a real state, draws one nominal action sequence
from the current policy, perturbs it with ``n_traj`` Gaussian noise
sequences, scores every perturbed rollout by its discounted model return plus
a bootstrapped terminal value, and averages the noise under softmin weights.
Calls are vectorised: ``s0`` may hold one state or a batch of ``M`` states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import Transition
from .errors import ContractViolation, RolloutAborted
from .replay import Batch

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]
ValueFn = Callable[[np.ndarray], np.ndarray]

MAX_ROWS_PER_CHUNK = 32768


@dataclass
class MprConfig:
    n_traj: int = 64
    h_min: int = 5
    h_max: int = 15
    anneal_fraction: float = 1.0
    lam: float = 1.0
    noise_fraction: float = 0.3  # sigma as a fraction of the action half-range
    noise_std: list[float] | None = None  # explicit per-dimension sigma, overrides noise_fraction
    gamma: float = 0.99
    reward_mode: str = "learned"
    pin_elite: str = "trajectory"  # or "step"

    def __post_init__(self):
        if not 1 <= self.h_min <= self.h_max:
            raise ContractViolation("need 1 <= h_min <= h_max")
        if self.lam <= 0:
            raise ContractViolation("temperature lam must be positive")
        if self.n_traj < 1:
            raise ContractViolation("n_traj must be positive")
        if self.noise_std is not None and np.any(np.asarray(self.noise_std) <= 0):
            raise ContractViolation("noise_std must be positive")
        if self.noise_std is None and self.noise_fraction <= 0:
            raise ContractViolation("noise_fraction must be positive")
        if self.pin_elite not in ("trajectory", "step"):
            raise ContractViolation("pin_elite must be 'trajectory' or 'step'")

    def sigma(self, action_low, action_high) -> np.ndarray:
        if self.noise_std is not None:
            return np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), np.shape(action_low)).copy()
        return self.noise_fraction * (np.asarray(action_high) - np.asarray(action_low)) / 2.0


@dataclass
class RolloutBatch:
    """Arrays carry a leading call axis when several start states are simulated."""

    base_actions: np.ndarray  # (H, da) or (M, H, da)
    noise: np.ndarray  # (N, H, da) or (M, N, H, da)
    costs: np.ndarray  # (N,) or (M, N)
    weights: np.ndarray  # (N,) or (M, N)
    elites: np.ndarray = field(default=None)  # pinned member per call

    @property
    def horizon(self) -> int:
        return self.base_actions.shape[-2]


def anneal_horizon(epoch: int, total_epochs: int, cfg: MprConfig) -> int:
    """Linear growth from ``h_min`` to ``h_max`` over ``anneal_fraction`` of training, then flat."""
    if epoch < 0 or (total_epochs > 0 and epoch > total_epochs):
        raise ContractViolation("epoch must lie in [0, total_epochs]")
    span = cfg.anneal_fraction * total_epochs
    frac = 1.0 if span <= 0 and epoch > 0 else (0.0 if span <= 0 else min(1.0, epoch / span))
    return cfg.h_min + int(np.floor((cfg.h_max - cfg.h_min) * frac + 0.5))


def importance_weights(costs, lam: float) -> np.ndarray:
    """Softmin weights ``exp(-(C - min C) / lam)`` normalised along the last axis."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0 or costs.shape[-1] == 0:
        raise ContractViolation("importance_weights needs at least one cost")
    if lam <= 0:
        raise ContractViolation("temperature must be positive")
    if not np.all(np.isfinite(costs)):
        raise ContractViolation("costs must be finite")
    beta = costs.min(axis=-1, keepdims=True)
    w = np.exp(-(costs - beta) / lam)
    return w / w.sum(axis=-1, keepdims=True)


def optimal_action_sequence(batch: RolloutBatch, action_low=None, action_high=None) -> np.ndarray:
    """``base + sum_i w_i * noise_i``, clipped to the action box when bounds are given."""
    a = batch.base_actions + np.einsum("...n,...nhd->...hd", batch.weights, batch.noise)
    if action_low is not None:
        a = np.clip(a, action_low, action_high)
    return a


def _rollout_costs(s0, actions, elites, model, target_v, cfg, rng, reward_fn):
    """Discounted negated return of each perturbed sequence; ``actions`` is (M, N, H, da)."""
    M, N, H, da = actions.shape
    s = np.repeat(s0, N, axis=0)
    members = np.repeat(elites, N)
    ret = np.zeros(M * N)
    for t in range(H):
        a = actions[:, :, t].reshape(M * N, da)
        pin = members if cfg.pin_elite == "trajectory" else None
        s, r = model.predict(s, a, rng, elite_idx=pin, reward_fn=reward_fn)
        ret += cfg.gamma**t * r
    ret += cfg.gamma**H * np.asarray(target_v(s), dtype=np.float64).reshape(-1)
    costs = -ret.reshape(M, N)
    if not np.all(np.isfinite(costs)):
        raise RolloutAborted("non-finite rollout cost")
    return costs


def nominal_sequence(s0, model, policy: Policy, H, elites, rng, reward_fn=None) -> np.ndarray:
    """Policy samples along the pinned elite's mean trajectory, shape (M, H, da)."""
    s = s0
    seq = []
    for _ in range(H):
        a = np.asarray(policy(s, rng), dtype=np.float64)
        seq.append(a)
        s, _ = model.predict(s, a, rng, elite_idx=elites, deterministic=True, reward_fn=reward_fn)
    return np.stack(seq, axis=1)


def simulate_batch(
    s0,
    model,
    policy: Policy,
    target_v: ValueFn,
    H: int,
    cfg: MprConfig,
    rng: np.random.Generator,
    action_low,
    action_high,
    reward_fn=None,
    base_actions=None,
    elites=None,
) -> RolloutBatch:
    """Sample perturbed rollouts around one nominal sequence per start state.

    Perturbed actions are clipped to the action box before simulation and the
    recorded noise is the effective (post-clip) perturbation, so the weighted
    update stays inside the box and costs match what was simulated.
    """
    if H < 1:
        raise ContractViolation("horizon must be at least 1")
    s0 = np.asarray(s0, dtype=np.float64)
    single = s0.ndim == 1
    s0 = np.atleast_2d(s0)
    M = len(s0)
    low = np.asarray(action_low, dtype=np.float64)
    high = np.asarray(action_high, dtype=np.float64)
    if elites is None:
        elites = model.sample_elites(M, rng)
    elites = np.broadcast_to(np.asarray(elites), (M,))
    if base_actions is None:
        base = nominal_sequence(s0, model, policy, H, elites, rng, reward_fn)
    else:
        base = np.asarray(base_actions, dtype=np.float64).reshape(M, H, -1)
    sigma = cfg.sigma(low, high)
    raw = rng.standard_normal((M, cfg.n_traj, H, len(low))) * sigma
    actions = np.clip(base[:, None] + raw, low, high)
    noise = actions - base[:, None]
    costs = _rollout_costs(s0, actions, elites, model, target_v, cfg, rng, reward_fn)
    weights = importance_weights(costs, cfg.lam)
    if single:
        return RolloutBatch(base[0], noise[0], costs[0], weights[0], elites)
    return RolloutBatch(base, noise, costs, weights, elites)


@dataclass
class MprResult:
    batch: Batch
    horizon: int
    mean_cost: float
    min_cost: float
    ess: float  # mean effective sample size 1 / sum(w^2)


def run_mpr(
    start_states,
    model,
    policy: Policy,
    target_v: ValueFn,
    H: int,
    cfg: MprConfig,
    rng: np.random.Generator,
    action_low,
    action_high,
    reward_fn=None,
) -> MprResult:
    """One rollout call per start state; returns all ``M * H`` optimised transitions."""
    start_states = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    M = len(start_states)
    chunk = max(1, MAX_ROWS_PER_CHUNK // cfg.n_traj)
    parts, costs, ess = [], [], []
    for lo in range(0, M, chunk):
        s0 = start_states[lo : lo + chunk]
        rb = simulate_batch(s0, model, policy, target_v, H, cfg, rng, action_low, action_high, reward_fn)
        a_opt = optimal_action_sequence(rb, action_low, action_high)
        parts.append(_replay(s0, a_opt, rb.elites, model, rng, reward_fn))
        costs.append(rb.costs)
        ess.append(1.0 / np.sum(rb.weights**2, axis=-1))
    batch = parts[0]
    for p in parts[1:]:
        batch = Batch.concat(batch, p)
    costs = np.concatenate(costs)
    return MprResult(batch, H, float(costs.mean()), float(costs.min()), float(np.concatenate(ess).mean()))


def _replay(s0, a_opt, elites, model, rng, reward_fn) -> Batch:
    """Roll the optimised sequences through the same pinned elites; rows ordered call-major."""
    M, H, da = a_opt.shape
    s = s0
    S, A, R, S2 = [], [], [], []
    for t in range(H):
        s_next, r = model.predict(s, a_opt[:, t], rng, elite_idx=elites, reward_fn=reward_fn)
        S.append(s)
        A.append(a_opt[:, t])
        R.append(r)
        S2.append(s_next)
        s = s_next
    stack = lambda xs: np.stack(xs, axis=1).reshape(M * H, *xs[0].shape[1:])  # noqa: E731
    return Batch(stack(S), stack(A), stack(R), stack(S2), np.zeros(M * H))


def mpr_transitions(
    s0,
    model,
    policy: Policy,
    target_v: ValueFn,
    cfg: MprConfig,
    epoch: int,
    total_epochs: int,
    rng: np.random.Generator,
    action_low,
    action_high,
    reward_fn=None,
) -> list[Transition]:
    """Single-start-state rollout returning the ``H`` transitions of the optimised sequence."""
    H = anneal_horizon(epoch, total_epochs, cfg)
    res = run_mpr(np.asarray(s0)[None], model, policy, target_v, H, cfg, rng, action_low, action_high, reward_fn)
    return res.batch.to_transitions()
