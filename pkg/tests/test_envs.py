import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mopac.envs import (
    EnvSpec,
    Pendulum,
    PointMass,
    TabularMDP,
    Transition,
    Valve,
    ValveParams,
    bellman_backup,
    expected_return,
    make_env,
    pendulum_energy,
    pendulum_step,
    policy_evaluation,
    random_mdp,
    solve_value_iteration,
    valve_rotation,
    wrap_angle,
)
from mopac.errors import ConfigurationError, ContractViolation, EnvironmentFault

# --- pendulum --------------------------------------------------------------------


def test_upright_equilibrium():
    tr = pendulum_step([0.0, 0.0], [0.0])
    assert tr.reward == 0.0
    assert tr.next_state[0] == 0.0 and tr.next_state[1] == 0.0


def test_hanging_reward():
    assert pendulum_step([math.pi, 0.0], [0.0]).reward == pytest.approx(-math.pi**2, abs=1e-12)
    assert pendulum_step([math.pi, 0.0], [0.0]).reward == pytest.approx(-9.8696, abs=1e-4)


def test_single_euler_step_by_hand():
    # theta'' = 3g/(2l) sin(theta) + 3/(m l^2) u = 15 * 1 + 3 * 2 = 21
    thetadot = 0.0 + 21.0 * 0.05
    theta = math.pi / 2 + thetadot * 0.05
    tr = pendulum_step([math.pi / 2, 0.0], [2.0])
    assert tr.next_state[1] == pytest.approx(thetadot, abs=1e-12)
    assert tr.next_state[0] == pytest.approx(theta, abs=1e-12)
    assert tr.reward == pytest.approx(-((math.pi / 2) ** 2 + 0.001 * 4.0), abs=1e-12)


def test_torque_is_clamped():
    assert np.array_equal(pendulum_step([0.3, 0.1], [50.0]).next_state, pendulum_step([0.3, 0.1], [2.0]).next_state)


def test_non_finite_state_is_environment_fault():
    with pytest.raises(EnvironmentFault):
        pendulum_step([np.nan, 0.0], [0.0])


def test_energy_drift_is_bounded_without_torque():
    state = np.array([2.0, 0.0])
    e0 = pendulum_energy(state)
    drifts = []
    for _ in range(200):
        state = pendulum_step(state, [0.0]).next_state
        drifts.append(abs(pendulum_energy(state) - e0))
    # semi-implicit Euler is symplectic: the error oscillates instead of accumulating
    assert max(drifts) < 1.0
    assert abs(drifts[-1]) < 1.0


def test_pendulum_episode_truncates_at_200_steps():
    env = Pendulum(seed=0)
    env.reset()
    flags = [env.step([0.0]) for _ in range(200)]
    assert all(not tr.done for tr, _ in flags)
    assert [trunc for _, trunc in flags].index(True) == 199


def test_pendulum_vectorised_dynamics_match_physical_step():
    env = Pendulum()
    theta, thetadot, u = 1.1, -0.4, 0.7
    obs = Pendulum.observe([theta, thetadot])
    tr = pendulum_step([theta, thetadot], [u])
    np.testing.assert_allclose(env.dynamics(obs[None], np.array([[u]]))[0], Pendulum.observe(tr.next_state), atol=1e-12)
    assert env.reward_fn(obs[None], np.array([[u]]))[0] == pytest.approx(tr.reward, abs=1e-12)


# --- valve ---------------------------------------------------------------------


def test_zero_action_gives_no_rotation():
    env = Valve(seed=1)
    env.reset()
    tr, _ = env.step([0.0, 0.0])
    assert tr.reward == 0.0


def test_full_action_from_engaged_fingers_gives_max_increment():
    params = ValveParams()
    p_next, inc = valve_rotation([[0.9, 0.9]], [[1.0, 1.0]], params)
    # stated piecewise formula: engaged (1 + 1 >= 1.2) and push = (1 - 0.5) / 0.5 = 1
    assert p_next.sum() >= params.grip_threshold
    assert inc[0] == params.max_increment


def test_small_commands_slip():
    _, inc = valve_rotation([[1.0, 1.0]], [[0.4, 0.4]])
    assert inc[0] == 0.0


def test_disengaged_fingers_do_not_turn_valve():
    _, inc = valve_rotation([[0.0, 0.0]], [[1.0, 1.0]])
    assert inc[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=50))
def test_valve_rewards_telescope_exactly(seed, actions):
    env = Valve(seed=seed)
    s0 = env.reset()
    total = 0.0
    for a in actions:
        tr, _ = env.step(a)
        total += tr.reward
    assert total == env.state[0] - s0[0]


def test_valve_episode_is_fifty_steps():
    env = Valve(seed=0)
    env.reset()
    n = 0
    while True:
        n += 1
        if env.step([1.0, 1.0])[1]:
            break
    assert n == 50


# --- shared environment behaviour ---------------------------------------------------------


@pytest.mark.parametrize("env_id", ["pendulum", "valve", "pointmass"])
def test_reset_with_seed_reproduces_trajectories(env_id):
    actions = np.random.default_rng(0).uniform(-1, 1, size=(30, make_env(env_id).spec.action_dim))

    def rollout():
        env = make_env(env_id)
        env.reset(seed=11)
        return [env.step(a)[0] for a in actions]

    for a, b in zip(rollout(), rollout()):
        assert np.array_equal(a.next_state, b.next_state) and a.reward == b.reward


def test_unknown_environment_id():
    with pytest.raises(ConfigurationError):
        make_env("cartpole")


def test_step_before_reset():
    with pytest.raises(ContractViolation):
        PointMass().step([0.0, 0.0])


def test_env_spec_rejects_inverted_bounds():
    with pytest.raises(ContractViolation):
        EnvSpec(1, 1, np.array([1.0]), np.array([0.0]), 10)


def test_transition_rejects_non_finite_reward():
    with pytest.raises(ContractViolation):
        Transition([0.0], [0.0], float("inf"), [0.0])


def test_wrap_angle_range():
    x = np.linspace(-20, 20, 1001)
    w = wrap_angle(x)
    assert np.all(w >= -np.pi) and np.all(w < np.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-12)


# --- tabular MDPs ------------------------------------------------------------------


def test_single_state_value_is_geometric_series():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
    v, pi = solve_value_iteration(mdp)
    assert v[0] == pytest.approx(10.0, abs=1e-8)
    assert pi[0] == 0


def test_zero_reward_mdp_has_zero_value():
    mdp = random_mdp(4, 3, 0.95, 0, reward_range=(0.0, 0.0))
    v, _ = solve_value_iteration(mdp)
    assert np.all(v == 0.0)


def test_value_iteration_matches_long_backup():
    mdp = random_mdp(5, 3, 0.9, 7)
    v, _ = solve_value_iteration(mdp, tol=1e-12)
    brute = np.zeros(5)
    for _ in range(10_000):
        brute = bellman_backup(mdp, brute)
    np.testing.assert_allclose(v, brute, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 0.9, 0.99]), st.sampled_from([1e-6, 1e-9]))
def test_value_iteration_is_a_fixed_point(seed, gamma, tol):
    mdp = random_mdp(6, 3, gamma, seed)
    v, _ = solve_value_iteration(mdp, tol=tol)
    assert np.max(np.abs(bellman_backup(mdp, v) - v)) <= tol


def test_greedy_policy_value_matches_optimal_value():
    mdp = random_mdp(6, 4, 0.95, 3)
    v, pi = solve_value_iteration(mdp, tol=1e-12)
    np.testing.assert_allclose(policy_evaluation(mdp, pi), v, atol=1e-8)


def test_stochastic_and_deterministic_policy_evaluation_agree():
    mdp = random_mdp(5, 3, 0.9, 2)
    det = np.array([0, 2, 1, 1, 0])
    one_hot = np.eye(3)[det]
    np.testing.assert_allclose(policy_evaluation(mdp, det), policy_evaluation(mdp, one_hot), atol=1e-12)
    assert expected_return(mdp, det) == pytest.approx(policy_evaluation(mdp, det).mean())


def test_tabular_mdp_validation():
    with pytest.raises(ContractViolation):
        TabularMDP(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), 0.9)
    with pytest.raises(ContractViolation):
        TabularMDP(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), 1.0)
    with pytest.raises(ContractViolation):
        TabularMDP(np.full((2, 1, 2), 0.5), np.ones((2, 1)), 0.9, r_max=0.5)


def test_random_mdp_rows_are_distributions():
    mdp = random_mdp(8, 4, 0.9, 0, concentration=0.1)
    np.testing.assert_allclose(mdp.P.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(mdp.P >= 0)
    assert np.max(np.abs(mdp.R)) <= mdp.r_max


def test_tabular_mdp_json_round_trip(tmp_path):
    mdp = random_mdp(3, 2, 0.95, 4)
    mdp.save(tmp_path / "m.json")
    back = TabularMDP.load(tmp_path / "m.json")
    assert np.array_equal(back.P, mdp.P) and np.array_equal(back.R, mdp.R)
    assert back.gamma == mdp.gamma and back.r_max == mdp.r_max
