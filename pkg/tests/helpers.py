"""Shared oracles for the test suite."""

import numpy as np

from mopac.approx import DenseNet


def finite_difference_grads(net: DenseNet, x, dy, h=1e-5):
    """Central differences of ``sum(net(x) * dy)`` with respect to every parameter."""
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = np.sum(net.forward(x) * dy)
            p[i] = old - h
            down = np.sum(net.forward(x) * dy)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(a, b, floor=1e-6):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_probe(rng):
    """A random network with at most 3 layers and 64 units, plus an input and output cotangent."""
    n_layers = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 65)) for _ in range(n_layers + 1)]
    acts = [str(rng.choice(["tanh", "relu", "identity"])) for _ in range(n_layers)]
    net = DenseNet.create(sizes, rng)
    net.activations = acts
    batch = int(rng.integers(1, 5))
    x = rng.normal(size=(batch, sizes[0]))
    dy = rng.normal(size=(batch, sizes[-1]))
    return net, x, dy


def gradient_probe_errors(n_probes=100, seed=0):
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_probes):
        net, x, dy = random_probe(rng)
        errors.append(max_relative_error(net.backward(x, dy), finite_difference_grads(net, x, dy)))
    return errors


def softmin_oracle(costs, lam):
    """Direct, unshifted evaluation for moderate costs."""
    e = np.exp(-np.asarray(costs, dtype=float) / lam)
    return e / e.sum()


class IdentityToy:
    """Deterministic s' = s + a with a caller-supplied reward r(s, a); stands in for the ensemble."""

    trained = True
    n_elites = 1

    def __init__(self, reward=lambda s, a: -np.sum((s + a) ** 2, axis=1)):
        self.reward = reward
        self.calls = 0

    def sample_elites(self, n, rng):
        return np.zeros(n, dtype=int)

    def predict(self, states, actions, rng=None, elite_idx=None, deterministic=False, reward_fn=None):
        self.calls += 1
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        nxt = states + actions
        r = self.reward(states, actions) if reward_fn is None else reward_fn(states, actions, nxt)
        return nxt, np.asarray(r, dtype=float)
