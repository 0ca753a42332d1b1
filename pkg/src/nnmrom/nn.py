"""Dense layers, the reconstruction loss, Adam and finite-difference checks.

Gradients are derived by hand per layer type.  Batches are stored
column-wise: an input of width ``n_in`` with ``N`` samples has shape
``(n_in, N)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, TrainingError

ACTIVATIONS = ("linear", "tanh", "sigmoid")


def sigmoid(x):
    # tanh identity: stable for large |x| without branching
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    return x


def activation_grad(name, y):
    """Derivative of the activation written in terms of its output ``y``."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(y)


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.size != self.weights.shape[0]:
            raise ContractViolation("weights must be out x in and bias must have length out")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractViolation("layer parameters must be finite")

    @classmethod
    def init(cls, n_in, n_out, activation="linear", rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        return cls(glorot_uniform(rng, n_out, n_in), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n_in:
            raise ContractViolation(f"layer expects {self.n_in} inputs, got {x.shape[0]}")
        pre = self.weights @ x + (self.bias if x.ndim == 1 else self.bias[:, None])
        return activate(self.activation, pre)

    def backward(self, x, y, dy):
        """Return ``(dx, [dW, db])`` given the forward input/output pair."""
        dpre = dy * activation_grad(self.activation, y)
        if x.ndim == 1:
            return self.weights.T @ dpre, [np.outer(dpre, x), dpre]
        return self.weights.T @ dpre, [dpre @ x.T, dpre.sum(axis=1)]


def forward(layer: DenseLayer, x):
    """``activation(W x + b)``; ``x`` is a vector or a column batch."""
    return layer.forward(x)


def stack_forward(layers: Sequence[DenseLayer], x, keep=False):
    acts = [np.asarray(x, dtype=float)]
    for layer in layers:
        acts.append(layer.forward(acts[-1]))
    return acts if keep else acts[-1]


def stack_backward(layers: Sequence[DenseLayer], acts, dy):
    """Backpropagate ``dy`` through ``layers``; returns ``(dx, grads)`` in param order."""
    grads: list[np.ndarray] = []
    for layer, x, y in zip(reversed(layers), reversed(acts[:-1]), reversed(acts[1:])):
        dy, g = layer.backward(x, y, dy)
        grads = g + grads
    return dy, grads


def stack_params(layers: Sequence[DenseLayer]) -> list[np.ndarray]:
    return [p for layer in layers for p in layer.params()]


def mse_loss(predicted, target):
    """Mean squared reconstruction error over all ``M x N`` entries and its gradient."""
    predicted = np.asarray(predicted, dtype=float)
    target = np.asarray(target, dtype=float)
    if predicted.shape != target.shape:
        raise ContractViolation(f"shape mismatch {predicted.shape} vs {target.shape}")
    diff = predicted - target
    size = diff.size
    return float(np.sum(diff * diff) / size), 2.0 * diff / size


@dataclass(eq=False)
class Adam:
    """Bias-corrected Adam updating parameter arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        if len(params) != len(grads):
            raise ContractViolation("params and grads differ in length")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient encountered")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or m.shape != p.shape:
                raise ContractViolation("gradient shape does not match its parameter")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


def clip_by_global_norm(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def grad_check(
    loss_and_grads: Callable[[], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grads`` must read the current values of ``params`` (which
    are perturbed in place and restored).  The relative error of each
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, analytic = loss_and_grads()
    analytic = [np.array(g, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads()
            flat[i] = orig - h
            lm, _ = loss_and_grads()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------- container

_MAGIC = b"NNMROMM\x00"
_VERSION = 1


def save_container(path, header: dict, arrays: Sequence[np.ndarray]) -> None:
    """Write a model file: magic, version, JSON header, then f64 parameter blobs.

    The header gets an ``arrays`` entry listing each blob's shape; blobs are
    row-major little-endian 64-bit floats in the same order.
    """
    header = dict(header)
    header["arrays"] = [list(np.shape(a)) for a in arrays]
    text = json.dumps(header, sort_keys=True).encode()
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(text)), text]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    Path(path).write_bytes(b"".join(parts))


def load_container(path) -> tuple[dict, list[np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ContractViolation(f"{path}: not a model container")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise ContractViolation(f"{path}: unsupported container version {version}")
    header = json.loads(buf[16 : 16 + hlen])
    off = 16 + hlen
    arrays = []
    for shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(buf, "<f8", count, off).reshape(shape).copy())
        off += 8 * count
    return header, arrays


def layers_to_spec(layers: Sequence[DenseLayer]) -> list[dict]:
    return [{"n_in": l.n_in, "n_out": l.n_out, "activation": l.activation} for l in layers]


def layers_from_spec(spec: Sequence[dict], arrays: Sequence[np.ndarray]) -> list[DenseLayer]:
    it = iter(arrays)
    return [DenseLayer(next(it), next(it), s["activation"]) for s in spec]
