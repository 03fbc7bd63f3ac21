"""Dense feed-forward networks with hand-written reverse-mode gradients.

Every learned object in the package (policy, critics, value function and
dynamics ensemble) is a :class:`DenseNet` or a :class:`GaussianHead` built on
one. Inputs may be a single vector ``(n_in,)`` or a batch ``(B, n_in)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, TrainingDivergence

ACTIVATIONS = ("tanh", "relu", "identity")

Gradients = list  # [dW0, db0, dW1, db1, ...], congruent with DenseNet.params


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


class DenseNet:
    """Fully connected network; ``weights[i]`` has shape ``(sizes[i+1], sizes[i])``."""

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activations: Sequence[str],
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
    ):
        self.layer_sizes = [int(n) for n in layer_sizes]
        self.activations = list(activations)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        n_layers = len(self.layer_sizes) - 1
        if n_layers < 1 or any(n <= 0 for n in self.layer_sizes):
            raise ContractViolation(f"invalid layer sizes {self.layer_sizes}")
        if len(self.activations) != n_layers or len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ContractViolation("one weight, bias and activation per layer required")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {act!r}")
            if w.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]):
                raise ContractViolation(f"layer {i}: weight shape {w.shape} does not match sizes")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ContractViolation(f"layer {i}: bias shape {b.shape} does not match sizes")

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator | int | None = None,
        hidden: str = "relu",
        output: str = "identity",
    ) -> "DenseNet":
        """Uniform fan-in initialisation, bound ``1/sqrt(fan_in)`` for weights and biases."""
        rng = np.random.default_rng(rng)
        sizes = [int(n) for n in layer_sizes]
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        acts = [hidden] * (len(sizes) - 2) + [output]
        return cls(sizes, acts, weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(
            self.layer_sizes,
            self.activations,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def same_architecture(self, other: "DenseNet") -> bool:
        return self.layer_sizes == other.layer_sizes and self.activations == other.activations

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ContractViolation(f"expected input of width {self.n_in}, got shape {np.shape(x)}")
        return x, single

    def forward(self, x) -> np.ndarray:
        h, single = self._as_batch(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(act, h @ w.T + b)
        return h[0] if single else h

    __call__ = forward

    def forward_cached(self, x) -> tuple[np.ndarray, tuple]:
        """Forward pass that also returns what :meth:`backward_cached` needs."""
        h, single = self._as_batch(x)
        layers = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            out = _activate(act, z)
            layers.append((h, z, out))
            h = out
        return (h[0] if single else h), (layers, single)

    def backward_cached(
        self, cache: tuple, output_grad, param_grads: bool = True, input_grad: bool = True
    ) -> tuple[Gradients | None, np.ndarray | None]:
        """Return parameter gradients and the gradient w.r.t. the input.

        Either half can be skipped; the skipped value is returned as ``None``.
        """
        layers, single = cache
        dy = np.asarray(output_grad, dtype=np.float64)
        if single:
            dy = dy[None, :]
        if dy.shape != layers[-1][2].shape:
            raise ContractViolation(f"output grad shape {dy.shape} != output shape {layers[-1][2].shape}")
        grads: Gradients | None = [None] * (2 * len(layers)) if param_grads else None
        for i in reversed(range(len(layers))):
            h, z, out = layers[i]
            act = self.activations[i]
            if act == "relu":
                dz = dy * (z > 0.0)
            elif act == "tanh":
                dz = dy * (1.0 - out * out)
            else:
                dz = dy
            if param_grads:
                grads[2 * i] = dz.T @ h
                grads[2 * i + 1] = dz.sum(axis=0)
            if i > 0 or input_grad:
                dy = dz @ self.weights[i]
        if not input_grad:
            return grads, None
        return grads, (dy[0] if single else dy)

    def backward(self, x, output_grad) -> Gradients:
        _, cache = self.forward_cached(x)
        grads, _ = self.backward_cached(cache, output_grad)
        return grads


@dataclass
class AdamState:
    """First/second moment buffers for one network."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check_grads(net: DenseNet, grads: Gradients) -> None:
    params = net.params
    if len(grads) != len(params):
        raise ContractViolation("gradient list does not match network parameters")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ContractViolation(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence("non-finite gradient entries")


def sgd_step(net: DenseNet, grads: Gradients, lr: float, adam_state: AdamState | None = None) -> DenseNet:
    """Update ``net`` in place (Adam when ``adam_state`` is given, else plain descent)."""
    _check_grads(net, grads)
    params = net.params
    if adam_state is None:
        for p, g in zip(params, grads):
            p -= lr * g
        return net
    st = adam_state
    if not st.m:
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
    st.t += 1
    c1 = 1.0 - st.beta1**st.t
    c2 = 1.0 - st.beta2**st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
    return net


class Adam:
    """Convenience pairing of a learning rate with an :class:`AdamState`."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)

    def step(self, net: DenseNet, grads: Gradients) -> DenseNet:
        return sgd_step(net, grads, self.lr, self.state)


def polyak_update(target: DenseNet, source: DenseNet, tau: float) -> DenseNet:
    """In place: ``target <- tau * source + (1 - tau) * target``."""
    if not target.same_architecture(source):
        raise ContractViolation("polyak update between different architectures")
    if not 0.0 < tau <= 1.0:
        raise ContractViolation(f"tau must lie in (0, 1], got {tau}")
    for t, s in zip(target.params, source.params):
        if tau == 1.0:
            t[...] = s
        else:
            t[...] = tau * s + (1.0 - tau) * t
    return target


def add_grads(a: Gradients, b: Gradients) -> Gradients:
    return [x + y for x, y in zip(a, b)]


class GaussianHead:
    """Diagonal Gaussian whose mean and (clamped) log-std are outputs of one net.

    The wrapped net emits ``2 * dim`` values: the first half is the mean, the
    second half the raw log-std, clipped into ``log_std_bounds``.
    """

    def __init__(self, net: DenseNet, dim: int, log_std_bounds: tuple[float, float] = (-20.0, 2.0)):
        if net.n_out != 2 * dim:
            raise ContractViolation(f"net must emit {2 * dim} outputs, emits {net.n_out}")
        lo, hi = log_std_bounds
        if not lo < hi:
            raise ContractViolation("log_std_bounds must satisfy min < max")
        self.net = net
        self.dim = dim
        self.log_std_bounds = (float(lo), float(hi))

    def copy(self) -> "GaussianHead":
        return GaussianHead(self.net.copy(), self.dim, self.log_std_bounds)

    def _split(self, out: np.ndarray):
        mean = out[..., : self.dim]
        raw = out[..., self.dim :]
        lo, hi = self.log_std_bounds
        return mean, np.clip(raw, lo, hi), raw

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std, _ = self._split(self.net.forward(x))
        return mean, log_std

    def forward_cached(self, x):
        out, net_cache = self.net.forward_cached(x)
        mean, log_std, raw = self._split(out)
        lo, hi = self.log_std_bounds
        inside = (raw >= lo) & (raw <= hi)
        return mean, log_std, (net_cache, inside)

    def backward_cached(self, cache, d_mean, d_log_std, input_grad: bool = True):
        net_cache, inside = cache
        d_out = np.concatenate([d_mean, np.where(inside, d_log_std, 0.0)], axis=-1)
        return self.net.backward_cached(net_cache, d_out, input_grad=input_grad)

    def sample(self, x, rng: np.random.Generator):
        """Reparameterised draw ``mean + std * noise``; returns (sample, mean, log_std, noise)."""
        mean, log_std = self.forward(x)
        noise = rng.standard_normal(mean.shape)
        return mean + np.exp(log_std) * noise, mean, log_std, noise


# --- serialisation -----------------------------------------------------------

_MAGIC = b"MPNN"
_FORMAT_VERSION = 1


def net_to_dict(net: DenseNet) -> dict:
    return {
        "layer_sizes": net.layer_sizes,
        "activations": net.activations,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_dict(d: dict) -> DenseNet:
    return DenseNet(d["layer_sizes"], d["activations"], d["weights"], d["biases"])


def save_nets(path: str | Path, nets: dict[str, DenseNet], meta: dict | None = None) -> None:
    """Write named networks to a flat binary file.

    Layout: magic, u32 version, u64 header length, JSON header (names, layer
    sizes, activations, user metadata), then every parameter array as
    little-endian float64 in row-major order.
    """
    header = {
        "version": _FORMAT_VERSION,
        "nets": [{"name": k, "layer_sizes": n.layer_sizes, "activations": n.activations} for k, n in nets.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _FORMAT_VERSION, len(blob)))
        f.write(blob)
        for net in nets.values():
            for p in net.params:
                f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_nets(path: str | Path) -> tuple[dict[str, DenseNet], dict]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ContractViolation(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != _FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<IQ")
    header = json.loads(data[offset : offset + hlen])
    offset += hlen
    nets = {}
    for spec in header["nets"]:
        sizes = spec["layer_sizes"]
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=offset).reshape(n_out, n_in)
            offset += 8 * n_in * n_out
            b = np.frombuffer(data, dtype="<f8", count=n_out, offset=offset)
            offset += 8 * n_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        nets[spec["name"]] = DenseNet(sizes, spec["activations"], weights, biases)
    if offset != len(data):
        raise ContractViolation(f"{path}: trailing bytes in checkpoint")
    return nets, header["meta"]
