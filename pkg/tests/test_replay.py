from collections import Counter, deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mopac.envs import Transition
from mopac.errors import ContractViolation, EmptyBuffer
from mopac.replay import Batch, MixedSampler, ReplayBuffer


def tr(i, sd=1, ad=1):
    return Transition(np.full(sd, float(i)), np.full(ad, -float(i)), float(i), np.full(sd, i + 0.5), False)


def filled(n, capacity=None, tag=0.0):
    buf = ReplayBuffer(capacity or max(n, 1), 1, 1)
    for i in range(n):
        buf.push(tr(i + tag))
    return buf


def test_push_one():
    buf = ReplayBuffer(4, 1, 1)
    buf.push(tr(0))
    assert len(buf) == 1


def test_fifo_eviction():
    buf = filled(5, capacity=4)
    assert len(buf) == 4
    assert 0.0 not in buf.all().rewards
    assert list(buf.all().rewards) == [1.0, 2.0, 3.0, 4.0]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(0, 60), st.integers(1, 7))
def test_contents_match_list_oracle(capacity, k, chunk):
    buf = ReplayBuffer(capacity, 1, 1)
    oracle = deque(maxlen=capacity)
    items = [tr(i) for i in range(k)]
    # alternate single pushes and batch pushes
    for start in range(0, k, chunk):
        part = items[start : start + chunk]
        if (start // chunk) % 2:
            buf.push_batch(Batch.from_transitions(part))
        else:
            for t in part:
                buf.push(t)
        oracle.extend(t.reward for t in part)
    assert len(buf) == min(k, capacity)
    assert list(buf.all().rewards) == list(oracle)


def test_push_rejects_wrong_dims():
    buf = ReplayBuffer(4, 2, 1)
    with pytest.raises(ContractViolation):
        buf.push(tr(0, sd=1))
    with pytest.raises(ContractViolation):
        buf.push(tr(0, sd=2, ad=2))


def test_sample_from_empty():
    with pytest.raises(EmptyBuffer):
        ReplayBuffer(3, 1, 1).sample(1, np.random.default_rng(0))


def test_sampling_is_uniform():
    buf = filled(10)
    draws = buf.sample(100_000, np.random.default_rng(0)).rewards
    counts = Counter(draws.tolist())
    p = 0.1
    sigma = np.sqrt(100_000 * p * (1 - p))
    for i in range(10):
        assert abs(counts[float(i)] - 100_000 * p) <= 3 * sigma


def test_sampled_batches_do_not_alias_storage():
    buf = filled(5)
    batch = buf.sample(3, np.random.default_rng(0))
    batch.states[:] = 999.0
    batch.rewards[:] = 999.0
    ts = batch.to_transitions()
    ts[0].state[:] = -1.0
    assert np.all(buf.all().states < 10)
    assert np.all(buf.all().rewards < 10)


def test_clear():
    buf = filled(5)
    buf.clear()
    assert len(buf) == 0


def test_batch_round_trip():
    ts = [tr(i) for i in range(4)]
    back = Batch.from_transitions(ts).to_transitions()
    for a, b in zip(ts, back):
        assert np.array_equal(a.state, b.state) and a.reward == b.reward and a.done == b.done


def test_dump(tmp_path):
    buf = filled(3)
    buf.dump(tmp_path / "d.npz")
    data = np.load(tmp_path / "d.npz")
    assert list(data["rewards"]) == [0.0, 1.0, 2.0]


# --- mixed sampling -------------------------------------------------------------------


def both(n_env=20, n_model=50):
    return filled(n_env), filled(n_model, tag=1000.0)


def test_real_ratio_one_uses_only_env():
    env, model = both()
    batch = MixedSampler(env, model, 1.0).sample_mixed(64, np.random.default_rng(0))
    assert len(batch) == 64
    assert all(t.reward < 1000 for t in batch)


def test_real_ratio_zero_uses_only_model():
    env, model = both()
    batch = MixedSampler(env, model, 0.0).sample_mixed(64, np.random.default_rng(0))
    assert all(t.reward >= 1000 for t in batch)


def test_five_percent_mixture_is_exact_per_batch():
    env, model = both()
    sampler = MixedSampler(env, model, 0.05)
    rng = np.random.default_rng(1)
    n_env = [int(np.sum(sampler.sample_batch(100, rng).rewards < 1000)) for _ in range(1000)]
    assert set(n_env) == {5}
    assert abs(np.mean(n_env) - 5) <= 1


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(1, 300))
def test_split_composition(ratio, batch_size):
    env, model = both()
    n_env, n_model = MixedSampler(env, model, ratio).split(batch_size)
    assert n_env == round(ratio * batch_size)
    assert n_env + n_model == batch_size


def test_fallback_to_non_empty_buffer():
    env = filled(10)
    empty = ReplayBuffer(10, 1, 1)
    assert len(MixedSampler(env, empty, 0.05).sample_mixed(32, np.random.default_rng(0))) == 32
    assert len(MixedSampler(empty, env, 0.95).sample_mixed(32, np.random.default_rng(0))) == 32


def test_both_empty():
    with pytest.raises(EmptyBuffer):
        MixedSampler(ReplayBuffer(2, 1, 1), ReplayBuffer(2, 1, 1)).sample_mixed(4, np.random.default_rng(0))


def test_invalid_ratio():
    with pytest.raises(ContractViolation):
        MixedSampler(filled(1), filled(1), 1.5)
