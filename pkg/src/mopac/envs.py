"""Desk-scale continuous environments and exactly solvable tabular MDPs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, EnvironmentFault


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    dt: float | None = None

    def __post_init__(self):
        low = np.asarray(self.action_low, dtype=np.float64)
        high = np.asarray(self.action_high, dtype=np.float64)
        if low.shape != (self.action_dim,) or high.shape != (self.action_dim,):
            raise ContractViolation("action bounds must have length action_dim")
        if not np.all(low < high):
            raise ContractViolation("action_low must be strictly below action_high")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)

    def clip(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.action_low, self.action_high)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool = False

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        self.action = np.asarray(self.action, dtype=np.float64)
        self.next_state = np.asarray(self.next_state, dtype=np.float64)
        self.reward = float(self.reward)
        self.done = bool(self.done)
        if not np.isfinite(self.reward):
            raise ContractViolation("transition reward must be finite")


def wrap_angle(theta):
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


class Env:
    """Common episode bookkeeping.

    ``step`` returns ``(transition, truncated)``. Hitting the step limit sets
    ``truncated``; ``transition.done`` is reserved for true terminal states so
    that time limits do not cut off value bootstrapping.
    """

    spec: EnvSpec
    has_reward_fn = True

    def __init__(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self._state: np.ndarray | None = None
        self._t = 0

    @property
    def state(self) -> np.ndarray:
        return self._state.copy()

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._state = self._initial_state()
        self._t = 0
        return self.state

    def step(self, action) -> tuple[Transition, bool]:
        if self._state is None:
            raise ContractViolation("reset() must be called before step()")
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if not np.all(np.isfinite(action)):
            raise EnvironmentFault("non-finite action")
        s = self._state
        s_next = self.dynamics(s[None], action[None])[0]
        if not np.all(np.isfinite(s_next)):
            raise EnvironmentFault("environment produced a non-finite state")
        r = float(self.reward_fn(s[None], action[None], s_next[None])[0])
        self._state = s_next
        self._t += 1
        return Transition(s.copy(), action, r, s_next.copy(), False), self._t >= self.spec.max_episode_steps

    # vectorised over a leading batch axis
    def dynamics(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward_fn(self, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _initial_state(self) -> np.ndarray:
        raise NotImplementedError


# --- pendulum swing-up -------------------------------------------------------

PENDULUM_G = 10.0
PENDULUM_M = 1.0
PENDULUM_L = 1.0
PENDULUM_DT = 0.05
PENDULUM_MAX_TORQUE = 2.0
PENDULUM_MAX_SPEED = 8.0


def _pendulum_physics(theta, thetadot, u):
    u = np.clip(u, -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    acc = 3 * PENDULUM_G / (2 * PENDULUM_L) * np.sin(theta) + 3.0 / (PENDULUM_M * PENDULUM_L**2) * u
    new_thetadot = np.clip(thetadot + acc * PENDULUM_DT, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    new_theta = theta + new_thetadot * PENDULUM_DT
    return new_theta, new_thetadot


def _pendulum_cost(theta, thetadot, u):
    u = np.clip(u, -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    return wrap_angle(theta) ** 2 + 0.1 * thetadot**2 + 0.001 * u**2


def pendulum_step(state, action) -> Transition:
    """One semi-implicit Euler step on the physical state ``[theta, theta_dot]`` (0 = upright)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (2,) or not np.all(np.isfinite(state)):
        raise EnvironmentFault(f"invalid pendulum state {state}")
    u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE))
    theta, thetadot = state
    new_theta, new_thetadot = _pendulum_physics(theta, thetadot, u)
    reward = -_pendulum_cost(theta, thetadot, u)
    return Transition(state, [u], reward, [new_theta, new_thetadot], False)


def pendulum_energy(state) -> float:
    theta, thetadot = state
    inertia = PENDULUM_M * PENDULUM_L**2 / 3.0
    return 0.5 * inertia * thetadot**2 + PENDULUM_M * PENDULUM_G * PENDULUM_L / 2.0 * np.cos(theta)


class Pendulum(Env):
    """Swing-up task observed as ``[cos(theta), sin(theta), theta_dot]``."""

    spec = EnvSpec(3, 1, np.array([-2.0]), np.array([2.0]), 200, PENDULUM_DT)

    def _initial_state(self):
        theta = self._rng.uniform(-np.pi, np.pi)
        thetadot = self._rng.uniform(-1.0, 1.0)
        return np.array([np.cos(theta), np.sin(theta), thetadot])

    @staticmethod
    def observe(physical) -> np.ndarray:
        theta, thetadot = physical
        return np.array([np.cos(theta), np.sin(theta), thetadot])

    def dynamics(self, states, actions):
        theta = np.arctan2(states[:, 1], states[:, 0])
        new_theta, new_thetadot = _pendulum_physics(theta, states[:, 2], actions[:, 0])
        return np.stack([np.cos(new_theta), np.sin(new_theta), new_thetadot], axis=1)

    def reward_fn(self, states, actions, next_states=None):
        theta = np.arctan2(states[:, 1], states[:, 0])
        return -_pendulum_cost(theta, states[:, 2], actions[:, 0])


# --- valve toy ---------------------------------------------------------------


@dataclass(frozen=True)
class ValveParams:
    n_fingers: int = 2
    finger_step: float = 0.25
    grip_threshold: float = 1.2
    slip_threshold: float = 0.5
    max_increment: float = 0.125
    detents: int = 64  # the valve turns in whole detents of max_increment / detents
    episode_steps: int = 50


def valve_rotation(finger_positions, action, params: ValveParams = ValveParams()):
    """Stick-slip coupling; returns ``(new_finger_positions, valve_increment)``.

    Fingers move by ``finger_step * command`` inside ``[0, 1]``. The valve turns
    only while the summed finger extension is at least ``grip_threshold`` and
    the mean command exceeds ``slip_threshold``; the increment then ramps
    linearly to ``max_increment`` at full command, in whole detents. With the
    default dyadic increment every valve angle is exactly representable, so
    episode rewards telescope without rounding. Vectorised over rows.
    """
    p = np.asarray(finger_positions, dtype=np.float64)
    u = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    p_next = np.clip(p + params.finger_step * u, 0.0, 1.0)
    engaged = p_next.sum(axis=-1) >= params.grip_threshold
    push = np.clip((u.mean(axis=-1) - params.slip_threshold) / (1.0 - params.slip_threshold), 0.0, 1.0)
    clicks = np.floor(push * params.detents)
    return p_next, params.max_increment * engaged * clicks / params.detents


class Valve(Env):
    """State ``[valve_angle, finger_1, ..., finger_k]``; reward is the angle increment."""

    def __init__(self, seed: int | None = None, params: ValveParams = ValveParams()):
        super().__init__(seed)
        self.params = params
        k = params.n_fingers
        self.spec = EnvSpec(1 + k, k, -np.ones(k), np.ones(k), params.episode_steps, None)

    def _initial_state(self):
        return np.concatenate([[0.0], self._rng.uniform(0.0, 0.2, size=self.params.n_fingers)])

    def dynamics(self, states, actions):
        p_next, inc = valve_rotation(states[:, 1:], actions, self.params)
        return np.concatenate([(states[:, 0] + inc)[:, None], p_next], axis=1)

    def reward_fn(self, states, actions, next_states):
        return next_states[:, 0] - states[:, 0]


# --- point mass ---------------------------------------------------------------


class PointMass(Env):
    """Planar double integrator regulated to the origin."""

    spec = EnvSpec(4, 2, -np.ones(2), np.ones(2), 100, 0.1)

    def _initial_state(self):
        return np.concatenate([self._rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def dynamics(self, states, actions):
        dt = self.spec.dt
        a = np.clip(actions, -1.0, 1.0)
        vel = states[:, 2:] + dt * a
        pos = states[:, :2] + dt * vel
        return np.concatenate([pos, vel], axis=1)

    def reward_fn(self, states, actions, next_states=None):
        a = np.clip(actions, -1.0, 1.0)
        return -(np.sum(states[:, :2] ** 2, axis=1) + 0.1 * np.sum(a**2, axis=1))


ENVIRONMENTS = {"pendulum": Pendulum, "valve": Valve, "pointmass": PointMass}


def make_env(env_id: str, seed: int | None = None) -> Env:
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ConfigurationError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed)


# --- tabular MDPs --------------------------------------------------------------


@dataclass
class TabularMDP:
    """``P[s, a, s']`` transition tensor, ``R[s, a]`` rewards, discount ``gamma``."""

    P: np.ndarray
    R: np.ndarray
    gamma: float
    r_max: float = field(default=None)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        n_s, n_a = self.R.shape
        if self.P.shape != (n_s, n_a, n_s):
            raise ContractViolation(f"P shape {self.P.shape} inconsistent with R shape {self.R.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must lie in [0, 1)")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ContractViolation("transition rows must be probability distributions")
        if self.r_max is None:
            self.r_max = float(np.max(np.abs(self.R))) if self.R.size else 0.0
        if np.max(np.abs(self.R)) > self.r_max + 1e-12:
            raise ContractViolation("rewards exceed r_max")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "R": self.R.tolist(), "gamma": self.gamma, "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMDP":
        return cls(np.array(d["P"]), np.array(d["R"]), float(d["gamma"]), d.get("r_max"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "TabularMDP":
        return cls.from_dict(json.loads(Path(path).read_text()))


def random_mdp(
    n_states: int,
    n_actions: int,
    gamma: float,
    rng: np.random.Generator | int | None = None,
    concentration: float = 1.0,
    reward_range: tuple[float, float] = (-1.0, 1.0),
) -> TabularMDP:
    """Dense random MDP with Dirichlet transition rows."""
    rng = np.random.default_rng(rng)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(*reward_range, size=(n_states, n_actions))
    return TabularMDP(P, R, gamma, float(max(abs(reward_range[0]), abs(reward_range[1]))))


def q_values(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ V


def bellman_backup(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    return q_values(mdp, V).max(axis=1)


def solve_value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Return ``(V, greedy_policy)`` with Bellman residual ``||V - TV||_inf <= tol``."""
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        V_new = bellman_backup(mdp, V)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    return V, q_values(mdp, V).argmax(axis=1)


def _policy_matrix(mdp: TabularMDP, policy) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.ndim == 1:
        pi = np.zeros((mdp.n_states, mdp.n_actions))
        pi[np.arange(mdp.n_states), policy.astype(int)] = 1.0
        return pi
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ContractViolation("stochastic policy must have shape (n_states, n_actions)")
    return policy.astype(np.float64)


def policy_evaluation(mdp: TabularMDP, policy) -> np.ndarray:
    """Exact value of a deterministic ``(S,)`` or stochastic ``(S, A)`` policy."""
    pi = _policy_matrix(mdp, policy)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.sum(pi * mdp.R, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def expected_return(mdp: TabularMDP, policy) -> float:
    """Value under a uniform start-state distribution."""
    return float(np.mean(policy_evaluation(mdp, policy)))
