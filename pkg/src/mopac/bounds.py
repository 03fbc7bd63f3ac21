"""Exact numerical checks of the MPC suboptimality bound and the model-return gap bound.

Everything here is exact dynamic programming on small tabular MDPs, so a
violated inequality cannot hide behind Monte-Carlo noise. Model error is
measured as the largest total-variation distance between corresponding
transition rows of the true and the model MDP.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import TabularMDP, expected_return, policy_evaluation, random_mdp, solve_value_iteration
from .errors import ConfigurationError, ContractViolation, ScenarioSizeError

MAX_DP_WORK = 10**9
TOLERANCE = 1e-9
CSV_COLUMNS = ["seed", "n_states", "n_actions", "gamma", "H", "eps_f", "eps_v", "gap", "bound_eq2", "bound_eq3", "satisfied"]
CSV_HEADER_NOTE = "# eps_f is the measured max total-variation distance between true and model transition rows"


def mpc_suboptimality_bound(gamma: float, horizon: int, eps_v: float, r_max: float, eps_f: float) -> float:
    """``2 g^H eps_V / (1 - g^H) + r_max (1 - g^H) / (1 - g) eps_f``."""
    gh = gamma**horizon
    value_term = 0.0 if eps_v == 0 else 2.0 * gh * eps_v / (1.0 - gh)
    return value_term + r_max * (1.0 - gh) / (1.0 - gamma) * eps_f


def infinite_horizon_bound(gamma: float, r_max: float, eps_f: float) -> float:
    return r_max * eps_f / (1.0 - gamma)


def model_gap_bound(gamma: float, r_max: float, eps_f: float, eps_pi: float) -> float:
    """Lower bound on ``J(pi) - J_model(pi)`` (a non-positive number)."""
    return -(2.0 * gamma * r_max * (eps_f + 2.0 * eps_pi) / (1.0 - gamma**2) + 4.0 * r_max * eps_pi / (1.0 - gamma))


def max_row_tv(a: TabularMDP, b: TabularMDP) -> float:
    if a.P.shape != b.P.shape:
        raise ContractViolation("MDPs must share state and action spaces")
    return float(0.5 * np.max(np.sum(np.abs(a.P - b.P), axis=2)))


def perturb_model(mdp: TabularMDP, epsilon_f: float, rng: np.random.Generator | int | None = None, toward=None) -> TabularMDP:
    """Mix every transition row with another distribution using weight ``epsilon_f``.

    The mixture target is a fresh Dirichlet row per ``(s, a)`` unless ``toward``
    supplies one (an ``(S,)`` row or a full ``(S, A, S)`` tensor). The TV
    distance of each row is ``epsilon_f * TV(target, row) <= epsilon_f``.
    """
    if not 0.0 <= epsilon_f <= 1.0:
        raise ContractViolation("epsilon_f must lie in [0, 1]")
    if epsilon_f == 0.0:
        return TabularMDP(mdp.P.copy(), mdp.R.copy(), mdp.gamma, mdp.r_max)
    rng = np.random.default_rng(rng)
    if toward is None:
        target = rng.dirichlet(np.ones(mdp.n_states), size=(mdp.n_states, mdp.n_actions))
    else:
        target = np.broadcast_to(np.asarray(toward, dtype=np.float64), mdp.P.shape)
    P = (1.0 - epsilon_f) * mdp.P + epsilon_f * target
    P /= P.sum(axis=2, keepdims=True)
    return TabularMDP(P, mdp.R.copy(), mdp.gamma, mdp.r_max)


def perturb_values(v: np.ndarray, epsilon_v: float, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Add noise whose largest absolute entry is exactly ``epsilon_v``."""
    rng = np.random.default_rng(rng)
    if epsilon_v == 0.0:
        return np.array(v, dtype=np.float64)
    noise = rng.uniform(-1.0, 1.0, size=np.shape(v))
    noise[rng.integers(len(noise))] = rng.choice([-1.0, 1.0])
    return v + epsilon_v * noise / np.max(np.abs(noise))


@dataclass
class MpcEvaluation:
    j: float  # true return under a uniform start distribution
    values: np.ndarray  # true per-state values of the MPC policy
    policy: np.ndarray  # first planned action per state


def mpc_first_actions(mdp_model: TabularMDP, v_hat: np.ndarray, horizon: int, gamma: float | None = None) -> np.ndarray:
    """Backward induction over ``horizon`` steps on the model with terminal reward ``v_hat``."""
    if horizon < 1:
        raise ContractViolation("horizon must be at least 1")
    S, A = mdp_model.n_states, mdp_model.n_actions
    if horizon * S * A * S > MAX_DP_WORK:
        raise ScenarioSizeError(f"exact DP over H={horizon}, |S|={S}, |A|={A} is too large")
    gamma = mdp_model.gamma if gamma is None else gamma
    W = np.asarray(v_hat, dtype=np.float64)
    for _ in range(horizon):
        Q = mdp_model.R + gamma * mdp_model.P @ W
        W = Q.max(axis=1)
    return Q.argmax(axis=1)


def mpc_policy_value(
    mdp_true: TabularMDP, mdp_model: TabularMDP, v_hat, horizon: int, gamma: float | None = None
) -> MpcEvaluation:
    """Plan on the model, execute the first action, evaluate that stationary policy on the true MDP."""
    policy = mpc_first_actions(mdp_model, v_hat, horizon, gamma)
    values = policy_evaluation(mdp_true, policy)
    return MpcEvaluation(float(values.mean()), values, policy)


@dataclass
class BoundScenario:
    mdp: TabularMDP
    epsilon_f: float
    epsilon_v: float
    horizon: int
    epsilon_pi: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon_f < 0 or self.epsilon_v < 0 or self.epsilon_pi < 0:
            raise ContractViolation("error magnitudes must be non-negative")
        if self.horizon < 1:
            raise ContractViolation("horizon must be at least 1")

    def to_dict(self) -> dict:
        return {
            "mdp": self.mdp.to_dict(),
            "epsilon_f": self.epsilon_f,
            "epsilon_v": self.epsilon_v,
            "horizon": self.horizon,
            "epsilon_pi": self.epsilon_pi,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundScenario":
        return cls(
            TabularMDP.from_dict(d["mdp"]),
            float(d["epsilon_f"]),
            float(d["epsilon_v"]),
            int(d["horizon"]),
            float(d.get("epsilon_pi", 0.0)),
            int(d.get("seed", 0)),
        )


@dataclass
class MpcBoundReport:
    seed: int
    n_states: int
    n_actions: int
    gamma: float
    horizon: int
    eps_f: float  # measured
    eps_v: float  # measured
    r_max: float
    j_opt: float
    j_mpc: float
    gap: float
    bound_eq2: float
    bound_eq3: float
    satisfied: bool
    state_gaps: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "H": self.horizon,
            "eps_f": self.eps_f,
            "eps_v": self.eps_v,
            "gap": self.gap,
            "bound_eq2": self.bound_eq2,
            "bound_eq3": self.bound_eq3,
            "satisfied": self.satisfied,
        }


def check_mpc_bound(scenario: BoundScenario) -> MpcBoundReport:
    """Inject model and value errors, then compare the exact MPC gap with the bound."""
    mdp = scenario.mdp
    rng = np.random.default_rng(scenario.seed)
    v_star, pi_star = solve_value_iteration(mdp, tol=1e-12)
    v_opt = policy_evaluation(mdp, pi_star)
    model = perturb_model(mdp, scenario.epsilon_f, rng)
    v_hat = perturb_values(v_opt, scenario.epsilon_v, rng)
    mpc = mpc_policy_value(mdp, model, v_hat, scenario.horizon)
    eps_f = max_row_tv(mdp, model)
    eps_v = float(np.max(np.abs(v_hat - v_opt)))
    j_opt = float(v_opt.mean())
    gap = j_opt - mpc.j
    bound = mpc_suboptimality_bound(mdp.gamma, scenario.horizon, eps_v, mdp.r_max, eps_f)
    return MpcBoundReport(
        seed=scenario.seed,
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        gamma=mdp.gamma,
        horizon=scenario.horizon,
        eps_f=eps_f,
        eps_v=eps_v,
        r_max=mdp.r_max,
        j_opt=j_opt,
        j_mpc=mpc.j,
        gap=gap,
        bound_eq2=bound,
        bound_eq3=infinite_horizon_bound(mdp.gamma, mdp.r_max, eps_f),
        satisfied=bool(gap <= bound + TOLERANCE),
        state_gaps=(v_opt - mpc.values).tolist(),
    )


@dataclass
class ModelGapReport:
    j_true: float
    j_model: float
    gap: float
    bound: float
    eps_f: float
    eps_pi: float
    holds: bool


def measure_model_gap(true_mdp: TabularMDP, model_mdp: TabularMDP, policy, policy_divergence: float = 0.0) -> ModelGapReport:
    """Evaluate one policy exactly on both MDPs and compare ``J - J_model`` with the lower bound."""
    if true_mdp.P.shape != model_mdp.P.shape:
        raise ContractViolation("MDPs must share state and action spaces")
    j_true = expected_return(true_mdp, policy)
    j_model = expected_return(model_mdp, policy)
    eps_f = max_row_tv(true_mdp, model_mdp)
    r_max = max(true_mdp.r_max, model_mdp.r_max)
    bound = model_gap_bound(true_mdp.gamma, r_max, eps_f, policy_divergence)
    gap = j_true - j_model
    return ModelGapReport(j_true, j_model, gap, bound, eps_f, policy_divergence, bool(gap >= bound - TOLERANCE))


# --- random scenario sweeps ---------------------------------------------------------

GAMMAS = (0.9, 0.95, 0.99)


def random_scenario(
    seed: int,
    max_states: int = 8,
    max_actions: int = 4,
    max_horizon: int = 4,
    gammas=GAMMAS,
    max_eps_f: float = 0.3,
    max_eps_v: float = 1.0,
) -> BoundScenario:
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(2, max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    gamma = float(rng.choice(gammas))
    mdp = random_mdp(n_s, n_a, gamma, rng, concentration=float(rng.choice([0.1, 1.0])))
    return BoundScenario(
        mdp,
        epsilon_f=float(rng.uniform(0.0, max_eps_f)),
        epsilon_v=float(rng.uniform(0.0, max_eps_v)),
        horizon=int(rng.integers(1, max_horizon + 1)),
        seed=seed,
    )


def mpc_bound_sweep(scenarios) -> list[MpcBoundReport]:
    return [check_mpc_bound(s) for s in scenarios]


def model_gap_sweep(n: int, seed: int = 0, max_states: int = 8, max_actions: int = 4) -> list[ModelGapReport]:
    """Random true/model pairs evaluated under random stochastic policies."""
    reports = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        n_s = int(rng.integers(2, max_states + 1))
        n_a = int(rng.integers(2, max_actions + 1))
        true = random_mdp(n_s, n_a, float(rng.choice(GAMMAS)), rng, concentration=float(rng.choice([0.1, 1.0])))
        model = perturb_model(true, float(rng.uniform(0.0, 0.3)), rng)
        policy = rng.dirichlet(np.ones(n_a), size=n_s)
        reports.append(measure_model_gap(true, model, policy, float(rng.choice([0.0, rng.uniform(0, 0.1)]))))
    return reports


def load_scenarios(spec) -> list[BoundScenario]:
    """Accept a list of explicit scenarios or ``{"generate": {...}}`` parameters."""
    try:
        if isinstance(spec, dict) and "generate" in spec:
            g = dict(spec["generate"])
            count = int(g.pop("count", 200))
            seed = int(g.pop("seed", 0))
            return [random_scenario(seed + i, **g) for i in range(count)]
        if isinstance(spec, dict) and "scenarios" in spec:
            spec = spec["scenarios"]
        return [BoundScenario.from_dict(d) for d in spec]
    except ContractViolation:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed scenario file: {exc!r}") from exc


def write_report_csv(reports, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        f.write(CSV_HEADER_NOTE + "\n")
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r if isinstance(r, dict) else r.row())


def report_to_dict(r) -> dict:
    return asdict(r)
