"""Small dense networks with hand-written backprop, Adam, and a squashed Gaussian head."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = "rlpomcp-checkpoint"
CHECKPOINT_VERSION = 1
LOG_STD_BOUNDS = (-5.0, 1.0)
_TANH_EPS = 1e-6


class ShapeMismatch(ValueError):
    pass


class CheckpointError(Exception):
    pass


class Mlp:
    """Fully connected net: tanh hidden layers, linear output.

    Parameters are kept in one flat list ``[W0, b0, W1, b1, ...]`` with
    ``W_i`` of shape ``(fan_in, fan_out)`` so optimizers can treat every
    network uniformly.
    """

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None, output_gain: float = 1.0):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        n_layers = len(self.layer_sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            gain = output_gain if i == n_layers - 1 else 1.0
            self.params.append(rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def copy(self) -> "Mlp":
        out = Mlp.__new__(Mlp)
        out.layer_sizes = list(self.layer_sizes)
        out.params = [p.copy() for p in self.params]
        return out

    def forward(self, x):
        """Returns ``(output, cache)``; accepts one input vector or a batch of rows."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.layer_sizes[0]:
            raise ShapeMismatch(f"expected input width {self.layer_sizes[0]}, got {h.shape[1]}")
        acts = [h]
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            h = z if i == self.n_layers - 1 else np.tanh(z)
            acts.append(h)
        out = h[0] if single else h
        return out, (single, acts)

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss w.r.t. every parameter and the input."""
        single, acts = cache
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if single else g
        if g.shape != acts[-1].shape:
            raise ShapeMismatch(f"grad_out shape {g.shape} != output shape {acts[-1].shape}")
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in range(self.n_layers - 1, -1, -1):
            if i != self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, (g[0] if single else g)


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, cache, grad_out):
    return net.backward(cache, grad_out)


class Adam:
    def __init__(self, params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        """In-place bias-corrected Adam update."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, opt: Adam):
    opt.step(params, grads)
    return params


# -- squashed Gaussian head ------------------------------------------------------


def gaussian_log_prob(u, mean, log_std):
    """Diagonal Gaussian log density of pre-squash samples ``u`` (summed over the last axis)."""
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi), axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * math.log(2.0 * math.pi * math.e)))


def squash_correction(a):
    return np.sum(np.log(1.0 - a * a + _TANH_EPS), axis=-1)


def gaussian_policy(mean, log_std, rng: np.random.Generator):
    """Sample ``a = tanh(u)``, ``u ~ N(mean, exp(log_std)^2)``.

    Returns ``(a, u, log_prob, entropy)`` where ``log_prob`` is the density
    of ``a`` (Gaussian density of ``u`` minus the tanh Jacobian) and
    ``entropy`` is that of the pre-squash Gaussian.
    """
    mean = np.asarray(mean, dtype=float)
    log_std = np.clip(np.asarray(log_std, dtype=float), *LOG_STD_BOUNDS)
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    a = np.tanh(u)
    log_prob = float(gaussian_log_prob(u, mean, log_std) - squash_correction(a))
    return a, u, log_prob, gaussian_entropy(log_std)


def squashed_log_prob(a, mean, log_std) -> float:
    """Log density of an already-squashed action ``a`` in (-1, 1)."""
    a = np.clip(np.asarray(a, dtype=float), -1 + 1e-12, 1 - 1e-12)
    log_std = np.clip(np.asarray(log_std, dtype=float), *LOG_STD_BOUNDS)
    u = np.arctanh(a)
    return float(gaussian_log_prob(u, mean, log_std) - squash_correction(a))


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Plain text: magic/version line, JSON metadata line, then ``name shape`` + row-major values per array."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", json.dumps(meta or {}, sort_keys=True)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        lines.append(f"{name} {' '.join(str(d) for d in arr.shape) or '-'}")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(lines) < 2 or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(lines[1])
    arrays = {}
    body = lines[2:]
    if len(body) % 2:
        raise CheckpointError(f"{path}: truncated checkpoint")
    for head, vals in zip(body[::2], body[1::2]):
        name, *dims = head.split()
        shape = () if dims == ["-"] else tuple(int(d) for d in dims)
        data = np.array([float(v) for v in vals.split()], dtype=float)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: array {name} has {data.size} values for shape {shape}")
        arrays[name] = data.reshape(shape)
    return arrays, meta
