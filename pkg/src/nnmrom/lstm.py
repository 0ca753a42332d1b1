"""Stacked LSTM regressor for latent dynamics driven by external forcing.

The regressor is explicitly autoregressive: the input at step ``t`` is the
forcing at ``t`` concatenated with the latent vector at ``t - 1``.  Training
feeds the true previous latent (teacher forcing) and backpropagates through
``lookback`` steps at a time while carrying the recurrent state along the
sequence.  Prediction feeds back the model's own output and carries the state
across every step.

Internally sequences are laid out as ``(T, width, batch)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import ContractViolation, DivergenceError, TrainingError

__all__ = [
    "LstmCell",
    "LstmState",
    "LstmConfig",
    "LstmRegressor",
    "cell_step",
    "build_regressor",
    "train_teacher_forced",
    "teacher_forced_loss",
    "predict_free_running",
    "warm_up",
    "continuation_score",
]

_sigmoid = nn.sigmoid


@dataclass(eq=False)
class LstmCell:
    """One LSTM layer.

    ``W`` (``4H x input_dim``), ``U`` (``4H x H``) and ``b`` (``4H``) stack
    the input-gate, forget-gate, output-gate and candidate blocks in that
    order; the per-gate matrices are exposed as views.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        H4 = self.U.shape[0]
        if H4 % 4 or self.U.shape != (H4, H4 // 4) or self.W.shape[0] != H4 or self.b.size != H4:
            raise ContractViolation("inconsistent LSTM weight shapes")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ContractViolation("LSTM parameters must be finite")

    @classmethod
    def init(cls, input_dim, cell_dim, rng=None, forget_bias=1.0):
        rng = rng if rng is not None else np.random.default_rng()
        W = np.vstack([nn.glorot_uniform(rng, cell_dim, input_dim) for _ in range(4)])
        U = np.vstack([nn.glorot_uniform(rng, cell_dim, cell_dim) for _ in range(4)])
        b = np.zeros(4 * cell_dim)
        b[cell_dim : 2 * cell_dim] = forget_bias
        return cls(W, U, b)

    @property
    def cell_dim(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def _block(self, arr, k):
        H = self.cell_dim
        return arr[k * H : (k + 1) * H]

    W_i = property(lambda self: self._block(self.W, 0))
    W_f = property(lambda self: self._block(self.W, 1))
    W_o = property(lambda self: self._block(self.W, 2))
    W_c = property(lambda self: self._block(self.W, 3))
    U_i = property(lambda self: self._block(self.U, 0))
    U_f = property(lambda self: self._block(self.U, 1))
    U_o = property(lambda self: self._block(self.U, 2))
    U_c = property(lambda self: self._block(self.U, 3))
    b_i = property(lambda self: self._block(self.b, 0))
    b_f = property(lambda self: self._block(self.b, 1))
    b_o = property(lambda self: self._block(self.b, 2))
    b_c = property(lambda self: self._block(self.b, 3))

    def params(self) -> list[np.ndarray]:
        return [self.W, self.U, self.b]


def cell_step(cell: LstmCell, x, h_prev, c_prev):
    """One LSTM update; returns ``(h, c)``.

    Gates ``i, f, o = sigmoid(W x + U h_prev + b)``, candidate
    ``g = tanh(W_c x + U_c h_prev + b_c)``, ``c = f c_prev + i g`` and
    ``h = o tanh(c)``.  Column batches are accepted.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != cell.input_dim:
        raise ContractViolation(f"cell expects {cell.input_dim} inputs, got {x.shape[0]}")
    if np.shape(h_prev)[0] != cell.cell_dim or np.shape(c_prev)[0] != cell.cell_dim:
        raise ContractViolation("state width does not match the cell")
    H = cell.cell_dim
    b = cell.b if x.ndim == 1 else cell.b[:, None]
    z = cell.W @ x + cell.U @ h_prev + b
    s = _sigmoid(z[: 3 * H])
    g = np.tanh(z[3 * H :])
    c = s[H : 2 * H] * c_prev + s[:H] * g
    h = s[2 * H :] * np.tanh(c)
    return h, c


def _layer_forward(cell: LstmCell, X, h0, c0):
    T, I, B = X.shape
    H = cell.cell_dim
    Wx = (cell.W @ X.transpose(1, 0, 2).reshape(I, T * B)).reshape(4 * H, T, B)
    Wx = Wx.transpose(1, 0, 2) + cell.b[None, :, None]
    gates = np.empty((T, 4 * H, B))
    Hs = np.empty((T + 1, H, B))
    Cs = np.empty((T + 1, H, B))
    tC = np.empty((T, H, B))
    Hs[0], Cs[0] = h0, c0
    U = cell.U
    H3 = 3 * H
    for t in range(T):
        z = Wx[t] + U @ Hs[t]
        s = _sigmoid(z[:H3])
        g = np.tanh(z[H3:])
        gates[t, :H3] = s
        gates[t, H3:] = g
        Cs[t + 1] = s[H : 2 * H] * Cs[t] + s[:H] * g
        tC[t] = np.tanh(Cs[t + 1])
        Hs[t + 1] = s[2 * H :] * tC[t]
    return Hs[1:], (X, Hs, Cs, gates, tC)


def _layer_backward(cell: LstmCell, dHout, cache):
    X, Hs, Cs, gates, tC = cache
    T, I, B = X.shape
    H = cell.cell_dim
    dZ = np.empty((T, 4 * H, B))
    dh_next = np.zeros((H, B))
    dc_next = np.zeros((H, B))
    UT = cell.U.T
    for t in range(T - 1, -1, -1):
        i = gates[t, :H]
        f = gates[t, H : 2 * H]
        o = gates[t, 2 * H : 3 * H]
        g = gates[t, 3 * H :]
        dh = dHout[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tC[t] ** 2)
        dz = dZ[t]
        dz[:H] = dc * g * i * (1.0 - i)
        dz[H : 2 * H] = dc * Cs[t] * f * (1.0 - f)
        dz[2 * H : 3 * H] = dh * tC[t] * o * (1.0 - o)
        dz[3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = UT @ dz
    dZf = dZ.transpose(1, 0, 2).reshape(4 * H, T * B)
    Xf = X.transpose(1, 0, 2).reshape(I, T * B)
    Hp = Hs[:-1].transpose(1, 0, 2).reshape(H, T * B)
    grads = [dZf @ Xf.T, dZf @ Hp.T, dZf.sum(axis=1)]
    dX = (cell.W.T @ dZf).reshape(I, T, B).transpose(1, 0, 2)
    return dX, grads, dh_next, dc_next


@dataclass
class LstmState:
    """Per-layer hidden and cell vectors (columns are batch members).

    ``x_prev`` is the normalized latent input of the last step taken, used
    by a second-order residual head; ``None`` means no history yet.
    """

    h: list
    c: list
    x_prev: np.ndarray | None = None

    @classmethod
    def zeros(cls, dims: Sequence[int], batch: int | None = None):
        shape = (lambda H: (H,)) if batch is None else (lambda H: (H, batch))
        return cls([np.zeros(shape(H)) for H in dims], [np.zeros(shape(H)) for H in dims])

    def copy(self) -> "LstmState":
        xp = None if self.x_prev is None else self.x_prev.copy()
        return LstmState([h.copy() for h in self.h], [c.copy() for c in self.c], xp)


@dataclass(frozen=True)
class LstmConfig:
    """Training settings.

    ``segment_length`` splits each (padded) sequence into contiguous
    streams that run as one batch; streams other than the first start
    from a zero state and skip ``burn_in`` steps (default ``lookback``)
    in the loss.  ``input_noise`` is the std of Gaussian noise added to the
    teacher-forced latent inputs (normalized units).  ``feedback`` is the
    probability that a step's latent input is the model's own previous
    prediction rather than the truth (0 is pure teacher forcing); it is
    applied after ``feedback_after`` teacher-forced epochs, and gradients
    flow through the fed-back predictions within each ``lookback`` window.
    Every ``feedback_anchor`` steps (default ``lookback``, 0 disables) the
    true latent is fed regardless, so training sees predictions at most
    that many steps ahead.  Over ``feedback_ramp`` epochs either the
    feedback probability (``feedback_schedule="probability"``) or the
    anchor spacing (``"horizon"``, growing from 1) rises linearly.
    ``residual_order`` 2 makes a residual head extrapolate linearly from
    the last two latent inputs (``2 x_t - x_{t-1}``) so the network learns
    the change in increment.  ``scale_increments`` rescales a residual head
    by the per-channel spread of the latent increments (of that order) in
    the training data.  The learning rate
    decays geometrically to ``lr * lr_final_factor`` over ``epochs``.
    """

    cells: tuple = (30,)
    lookback: int = 30
    autoregressive: bool = True
    residual: bool = False
    residual_order: int = 1
    lr: float = 2e-3
    lr_final_factor: float = 0.1
    epochs: int = 150
    segment_length: int = 500
    burn_in: int | None = None
    clip_norm: float = 5.0
    input_noise: float = 0.0
    pad_front: bool = True
    seed: int = 0
    val_every: int = 0
    forget_bias: float = 1.0
    feedback: float = 0.0
    feedback_after: int = 0
    feedback_anchor: int | None = None
    feedback_ramp: int = 0
    feedback_schedule: str = "probability"
    scale_increments: bool = False

    def __post_init__(self):
        if not 0.0 <= self.feedback <= 1.0:
            raise ContractViolation("feedback must lie in [0, 1]")
        if self.feedback_schedule not in ("probability", "horizon"):
            raise ContractViolation("feedback_schedule must be 'probability' or 'horizon'")
        if self.lookback < 1:
            raise ContractViolation("lookback must be >= 1")
        if not self.cells or any(c < 1 for c in self.cells):
            raise ContractViolation("cells must list positive layer widths")
        if self.segment_length < self.lookback:
            raise ContractViolation("segment_length must be >= lookback")
        if self.residual_order not in (1, 2):
            raise ContractViolation("residual_order must be 1 or 2")


@dataclass(eq=False)
class LstmRegressor:
    layers: list
    head: nn.DenseLayer
    n_forcing: int
    lookback: int = 30
    autoregressive: bool = True
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None
    rest_latent: np.ndarray = None
    residual: bool = False
    delta_scale: np.ndarray = None
    residual_order: int = 1

    def __post_init__(self):
        k = self.head.n_out
        if self.residual and not self.autoregressive:
            raise ContractViolation("a residual head needs the autoregressive input")
        if self.residual_order not in (1, 2):
            raise ContractViolation("residual_order must be 1 or 2")
        if self.lookback < 1:
            raise ContractViolation("lookback must be >= 1")
        if self.head.activation != "linear":
            raise ContractViolation("regressor head must be linear")
        expected = self.n_forcing + (k if self.autoregressive else 0)
        if self.layers[0].input_dim != expected:
            raise ContractViolation(f"first layer takes {self.layers[0].input_dim}, need {expected}")
        for lo, hi in zip(self.layers, self.layers[1:]):
            if hi.input_dim != lo.cell_dim:
                raise ContractViolation("stacked layer widths do not chain")
        if self.head.n_in != self.layers[-1].cell_dim:
            raise ContractViolation("head width does not match the last layer")
        defaults = {
            "in_mean": np.zeros(self.n_forcing),
            "in_std": np.ones(self.n_forcing),
            "out_mean": np.zeros(k),
            "out_std": np.ones(k),
            "rest_latent": np.zeros(k),
            "delta_scale": np.ones(k),
        }
        for name, default in defaults.items():
            val = getattr(self, name)
            setattr(self, name, default if val is None else np.asarray(val, dtype=float).reshape(-1))

    @property
    def latent_dim(self) -> int:
        return self.head.n_out

    @property
    def cell_dims(self) -> list[int]:
        return [c.cell_dim for c in self.layers]

    def params(self) -> list[np.ndarray]:
        return [p for c in self.layers for p in c.params()] + self.head.params()

    def norm_in(self, F):
        return (F - self.in_mean[:, None]) / self.in_std[:, None]

    def norm_out(self, Z):
        return (Z - self.out_mean[:, None]) / self.out_std[:, None]

    def denorm_out(self, Zn):
        return Zn * self.out_std[:, None] + self.out_mean[:, None]

    def save(self, path, meta=None) -> None:
        header = {
            "kind": "lstm_regressor",
            "cells": [[c.input_dim, c.cell_dim] for c in self.layers],
            "head": nn.layers_to_spec([self.head]),
            "n_forcing": self.n_forcing,
            "lookback": self.lookback,
            "autoregressive": self.autoregressive,
            "residual": self.residual,
            "residual_order": self.residual_order,
            "meta": meta or {},
        }
        stats = [self.in_mean, self.in_std, self.out_mean, self.out_std, self.rest_latent, self.delta_scale]
        nn.save_container(path, header, self.params() + stats)

    @classmethod
    def load(cls, path) -> "LstmRegressor":
        header, arrays = nn.load_container(path)
        if header.get("kind") != "lstm_regressor":
            raise ContractViolation(f"{path} does not hold an LSTM regressor")
        it = iter(arrays)
        layers = [LstmCell(next(it), next(it), next(it)) for _ in header["cells"]]
        head = nn.layers_from_spec(header["head"], [next(it), next(it)])[0]
        stats = [next(it) for _ in range(6)]
        return cls(
            layers, head, header["n_forcing"], header["lookback"], header["autoregressive"], *stats[:5],
            residual=header.get("residual", False), delta_scale=stats[5],
            residual_order=header.get("residual_order", 1),
        )


def build_regressor(
    n_forcing,
    latent_dim,
    cells=(30,),
    lookback=30,
    autoregressive=True,
    seed=0,
    forget_bias=1.0,
    residual=False,
    residual_order=1,
):
    rng = np.random.default_rng(seed)
    width = n_forcing + (latent_dim if autoregressive else 0)
    layers = []
    for H in cells:
        layers.append(LstmCell.init(width, H, rng, forget_bias))
        width = H
    head = nn.DenseLayer.init(width, latent_dim, "linear", rng)
    if residual:
        head.weights *= 0.1
    return LstmRegressor(
        layers, head, n_forcing, lookback, autoregressive, residual=residual, residual_order=residual_order
    )


# ------------------------------------------------------------ sequences

def _base(reg: LstmRegressor, lat, lat_prev):
    """Residual offset from the latent inputs at ``t`` and ``t - 1``."""
    if reg.residual_order == 1:
        return lat
    return 2.0 * lat - (lat if lat_prev is None else lat_prev)


def _chunk_forward(reg: LstmRegressor, X, state: LstmState):
    caches = []
    inp = X
    for l, cell in enumerate(reg.layers):
        out, cache = _layer_forward(cell, inp, state.h[l], state.c[l])
        caches.append(cache)
        inp = out
    T, H, B = inp.shape
    Hf = inp.transpose(1, 0, 2).reshape(H, T * B)
    Y = (reg.head.weights @ Hf + reg.head.bias[:, None]).reshape(-1, T, B).transpose(1, 0, 2)
    lat = X[:, reg.n_forcing :, :]
    if reg.residual:
        if reg.residual_order == 1:
            base = lat
        else:
            first = lat[:1] if state.x_prev is None else state.x_prev[None]
            base = 2.0 * lat - np.concatenate([first, lat[:-1]])
        Y = reg.delta_scale[None, :, None] * Y + base
    final = LstmState([c[1][-1].copy() for c in caches], [c[2][-1].copy() for c in caches], lat[-1].copy())
    return Y, (caches, Hf), final


def _chunk_backward(reg: LstmRegressor, dY, cache):
    caches, Hf = cache
    T, k, B = dY.shape
    if reg.residual:
        dY = dY * reg.delta_scale[None, :, None]
    dYf = dY.transpose(1, 0, 2).reshape(k, T * B)
    head_grads = [dYf @ Hf.T, dYf.sum(axis=1)]
    dH = (reg.head.weights.T @ dYf).reshape(-1, T, B).transpose(1, 0, 2)
    grads = []
    for l in range(len(reg.layers) - 1, -1, -1):
        dH, g, _, _ = _layer_backward(reg.layers[l], dH, caches[l])
        grads = g + grads
    return grads + head_grads


def _closed_forward(reg: LstmRegressor, X, Y, feed, state: LstmState, prev):
    """Forward pass where the latent input may be the model's own prediction.

    ``X`` holds the teacher-forced inputs (``T, in, B``); where ``feed[t]``
    (``T, B`` booleans) is set, the latent part of the input at ``t`` is
    replaced by the prediction made at ``t - 1`` (``prev`` before the
    first step).  Returns outputs, a cache for ``_closed_backward``, the
    final state and the last prediction.
    """
    T, _, B = X.shape
    nf = reg.n_forcing
    W, b = reg.head.weights, reg.head.bias[:, None]
    ds = reg.delta_scale[:, None]
    h = [x.copy() for x in state.h]
    c = [x.copy() for x in state.c]
    lat_prev = state.x_prev
    out = np.empty((T, reg.latent_dim, B))
    steps = []
    for t in range(T):
        x = X[t]
        if feed[t].any():
            x = x.copy()
            x[nf:] = np.where(feed[t][None, :], prev, x[nf:])
        layer_cache = []
        inp = x
        for l, cell in enumerate(reg.layers):
            H = cell.cell_dim
            z = cell.W @ inp + cell.U @ h[l] + cell.b[:, None]
            s = _sigmoid(z[: 3 * H])
            g = np.tanh(z[3 * H :])
            cn = s[H : 2 * H] * c[l] + s[:H] * g
            tc = np.tanh(cn)
            hn = s[2 * H :] * tc
            layer_cache.append((inp, h[l], c[l], s, g, tc))
            h[l], c[l] = hn, cn
            inp = hn
        prev = W @ inp + b
        if reg.residual:
            prev = ds * prev + _base(reg, x[nf:], lat_prev)
        lat_prev = x[nf:]
        out[t] = prev
        steps.append((layer_cache, inp))
    return out, (steps, feed, state.x_prev is None), LstmState(h, c, lat_prev.copy()), prev


def _closed_backward(reg: LstmRegressor, dY, cache):
    steps, feed, no_history = cache
    nf = reg.n_forcing
    a1, a2 = (1.0, 0.0) if reg.residual_order == 1 else (2.0, -1.0)
    grads = [np.zeros_like(p) for p in reg.params()]
    dWh, dbh = grads[-2], grads[-1]
    dh_next = [np.zeros((cell.cell_dim, dY.shape[2])) for cell in reg.layers]
    dc_next = [np.zeros_like(d) for d in dh_next]
    dfeed = np.zeros(dY.shape[1:])
    dlag = np.zeros(dY.shape[1:])  # from step t + 1 through its x_{t} lag term
    ds = reg.delta_scale[:, None]
    for t in range(len(steps) - 1, -1, -1):
        layer_cache, top = steps[t]
        dy = dY[t] + dfeed
        dyh = ds * dy if reg.residual else dy
        dWh += dyh @ top.T
        dbh += dyh.sum(axis=1)
        dx = reg.head.weights.T @ dyh
        for l in range(len(reg.layers) - 1, -1, -1):
            cell = reg.layers[l]
            H = cell.cell_dim
            inp, hp, cp, s, g, tc = layer_cache[l]
            i, f, o = s[:H], s[H : 2 * H], s[2 * H :]
            dh = dx + dh_next[l]
            dc = dc_next[l] + dh * o * (1.0 - tc * tc)
            dz = np.vstack([dc * g * i * (1.0 - i), dc * cp * f * (1.0 - f), dh * tc * o * (1.0 - o), dc * i * (1.0 - g * g)])
            grads[3 * l] += dz @ inp.T
            grads[3 * l + 1] += dz @ hp.T
            grads[3 * l + 2] += dz.sum(axis=1)
            dh_next[l] = cell.U.T @ dz
            dc_next[l] = dc * f
            dx = cell.W.T @ dz
        dx = dx[nf:]
        if reg.residual:
            if t == 0 and no_history and a2:
                dx = dx + (a1 + a2) * dy  # the first step uses x_t as its own lag
            else:
                dx = dx + a1 * dy
            dx = dx + dlag
            dlag = a2 * dy
        dfeed = np.where(feed[t][None, :], dx, 0.0)
    return grads


def _masked_loss(Y, target, mask):
    """Mean squared error over latent channels and unmasked steps, with gradient."""
    k = Y.shape[1]
    count = mask.sum() * k
    diff = (Y - target) * mask[:, None, :]
    if count == 0:
        return 0.0, np.zeros_like(Y), 0
    return float(np.sum(diff * diff) / count), 2.0 * diff / count, count


def _prepare(reg: LstmRegressor, forcing, latents, pad: int):
    """Normalized inputs and targets ``(T, width)`` for one sequence."""
    F = np.atleast_2d(np.asarray(forcing, dtype=float))
    Z = np.atleast_2d(np.asarray(latents, dtype=float))
    if F.shape[1] != Z.shape[1]:
        raise ContractViolation(f"forcing has {F.shape[1]} steps, latents {Z.shape[1]}")
    if F.shape[0] != reg.n_forcing or Z.shape[0] != reg.latent_dim:
        raise ContractViolation("forcing or latent channel count does not match the regressor")
    if pad:
        F = np.hstack([np.zeros((F.shape[0], pad)), F])
        Z = np.hstack([np.repeat(reg.rest_latent[:, None], pad, axis=1), Z])
    Fn, Zn = reg.norm_in(F), reg.norm_out(Z)
    if reg.autoregressive:
        prev = np.hstack([reg.norm_out(reg.rest_latent[:, None]), Zn[:, :-1]])
        X = np.vstack([Fn, prev])
    else:
        X = Fn
    return X.T, Zn.T


def teacher_forced_loss(reg: LstmRegressor, sequences, reduce="mean", pad=False):
    """Teacher-forced loss over whole sequences, state reset at each one.

    ``reduce="sum"`` returns the summed squared error, which is additive
    over sequences.
    """
    total, count = 0.0, 0
    for forcing, latents in sequences:
        X, Y = _prepare(reg, forcing, latents, reg.lookback if pad else 0)
        out, _, _ = _chunk_forward(reg, X[:, :, None], LstmState.zeros(reg.cell_dims, 1))
        diff = out[:, :, 0] - Y
        total += float(np.sum(diff * diff))
        count += diff.size
    return total if reduce == "sum" else total / count


def sequence_loss_and_grads(reg: LstmRegressor, X, Y, state=None):
    """Loss and gradients for one chunk ``X`` (``T, in, B``) against ``Y`` (``T, k, B``)."""
    state = state or LstmState.zeros(reg.cell_dims, X.shape[2])
    out, cache, _ = _chunk_forward(reg, X, state)
    loss, dY, _ = _masked_loss(out, Y, np.ones((X.shape[0], X.shape[2])))
    return loss, _chunk_backward(reg, dY, cache)


@dataclass
class LstmHistory:
    loss: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = -1


def _fit_stats(reg, sequences, scale_increments=False):
    F = np.hstack([np.atleast_2d(f) for f, _ in sequences])
    Z = np.hstack([np.atleast_2d(z) for _, z in sequences])
    reg.in_mean, reg.out_mean = F.mean(axis=1), Z.mean(axis=1)
    fs, zs = F.std(axis=1), Z.std(axis=1)
    reg.in_std = np.where(fs > 0, fs, 1.0)
    reg.out_std = np.where(zs > 0, zs, 1.0)
    reg.delta_scale = np.ones(Z.shape[0])
    if reg.residual and scale_increments:
        # increments of the normalized latents, so the head learns at unit scale
        n = reg.residual_order
        dZ = np.hstack([np.diff(reg.norm_out(np.atleast_2d(z)), n=n, axis=1) for _, z in sequences])
        ds = dZ.std(axis=1) if dZ.shape[1] > 1 else np.ones(Z.shape[0])
        reg.delta_scale = np.where(ds > 0, ds, 1.0)


def _streams(prepared, seg_len, offset, burn_in):
    """Cut sequences into equal-length, masked stream batches."""
    pieces = []
    for X, Y in prepared:
        T = X.shape[0]
        bounds = [0] + list(range(min(offset, T) or seg_len, T, seg_len))
        if bounds[-1] != T:
            bounds.append(T)
        bounds = sorted(set(bounds))
        for s, e in zip(bounds[:-1], bounds[1:]):
            m = np.ones(e - s)
            if s > 0:
                m[:burn_in] = 0.0
            pieces.append((X[s:e], Y[s:e], m))
    L = max(p[0].shape[0] for p in pieces)
    B = len(pieces)
    Xb = np.zeros((L, prepared[0][0].shape[1], B))
    Yb = np.zeros((L, prepared[0][1].shape[1], B))
    Mb = np.zeros((L, B))
    for j, (x, y, m) in enumerate(pieces):
        Xb[: x.shape[0], :, j] = x
        Yb[: y.shape[0], :, j] = y
        Mb[: m.size, j] = m
    return Xb, Yb, Mb


def train_teacher_forced(
    reg: LstmRegressor,
    sequences,
    config: LstmConfig | None = None,
    validation=None,
    refit_normalization=True,
    callback=None,
):
    """Fit the regressor with teacher forcing and truncated BPTT.

    ``sequences`` is a list of ``(forcing c x T, latents k x T)`` pairs in
    physical units; each is independent (state starts at zero).  With
    ``pad_front`` each sequence is preceded by ``lookback`` rest rows.

    ``validation`` optionally holds ``(forcing, latents)`` pairs scored
    every ``val_every`` epochs by ``continuation_score``; the best scoring
    parameters are kept.  ``callback(epoch, reg)`` runs after every epoch.
    Returns ``(reg, history)``.
    """
    cfg = config or LstmConfig()
    sequences = [(np.atleast_2d(f), np.atleast_2d(z)) for f, z in sequences]
    if not sequences:
        raise ContractViolation("no training sequences")
    if refit_normalization:
        _fit_stats(reg, sequences, cfg.scale_increments)
    pad = reg.lookback if cfg.pad_front else 0
    prepared = [_prepare(reg, f, z, pad) for f, z in sequences]
    L = reg.lookback
    burn_in = L if cfg.burn_in is None else cfg.burn_in
    rng = np.random.default_rng(cfg.seed)
    params = reg.params()
    opt = nn.Adam(lr=cfg.lr)
    decay = cfg.lr_final_factor ** (1.0 / max(cfg.epochs - 1, 1))
    n_forcing = reg.n_forcing
    hist = LstmHistory()
    best_score, best_params = np.inf, None

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * decay**epoch
        offset = int(rng.integers(0, cfg.segment_length)) if cfg.segment_length else 0
        Xb, Yb, Mb = _streams(prepared, cfg.segment_length, offset, burn_in)
        if cfg.input_noise and reg.autoregressive:
            Xb = Xb.copy()
            Xb[:, n_forcing:, :] += cfg.input_noise * rng.standard_normal(Xb[:, n_forcing:, :].shape)
        B = Xb.shape[2]
        state = LstmState.zeros(reg.cell_dims, B)
        closed = reg.autoregressive and cfg.feedback > 0 and epoch >= cfg.feedback_after
        if closed:
            ramp = min(1.0, (epoch - cfg.feedback_after + 1) / cfg.feedback_ramp) if cfg.feedback_ramp else 1.0
            anchor = cfg.feedback_anchor if cfg.feedback_anchor is not None else L
            if cfg.feedback_schedule == "horizon":
                feed = rng.random(Xb.shape[::2]) < cfg.feedback
                anchor = max(1, int(round(1 + ramp * (max(anchor, 1) - 1))))
            else:
                feed = rng.random(Xb.shape[::2]) < cfg.feedback * ramp
            feed[0] = False
            if anchor:
                feed[int(rng.integers(anchor)) :: anchor] = False
            prev = np.zeros((reg.latent_dim, B))
        total, weight = 0.0, 0
        for s in range(0, Xb.shape[0], L):
            sl = slice(s, s + L)
            if closed:
                out, cache, state, prev = _closed_forward(reg, Xb[sl], Yb[sl], feed[sl], state, prev)
            else:
                out, cache, state = _chunk_forward(reg, Xb[sl], state)
            loss, dY, count = _masked_loss(out, Yb[sl], Mb[sl])
            if not np.isfinite(loss):
                raise TrainingError(f"LSTM loss became non-finite in epoch {epoch}")
            if count == 0:
                continue
            grads = _closed_backward(reg, dY, cache) if closed else _chunk_backward(reg, dY, cache)
            grads, _ = nn.clip_by_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads)
            total += loss * count
            weight += count
        hist.loss.append(total / max(weight, 1))
        if callback is not None:
            callback(epoch, reg)
        if validation and cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
            score = continuation_score(reg, validation)
            hist.val.append((epoch, score))
            if score < best_score:
                best_score, hist.best_epoch = score, epoch
                best_params = [p.copy() for p in params]
    if best_params is not None:
        for p, b in zip(params, best_params):
            p[...] = b
    return reg, hist


def continuation_score(reg: LstmRegressor, sequences) -> float:
    """Mean squared free-running error (normalized latent units) over ``sequences``.

    Each ``(forcing, latents)`` pair is warmed up teacher-forced over its
    first ``lookback`` steps and predicted free-running for the rest.
    Divergence scores infinity.
    """
    L = reg.lookback
    total, count = 0.0, 0
    for forcing, latents in sequences:
        F, Z = np.atleast_2d(forcing), np.atleast_2d(latents)
        if F.shape[1] <= L:
            raise ContractViolation("validation sequence must be longer than the lookback")
        state = warm_up(reg, F[:, :L], Z[:, :L])
        try:
            pred, _ = predict_free_running(reg, F[:, L:], initial_latent=Z[:, L - 1], initial_state=state)
        except DivergenceError:
            return np.inf
        diff = reg.norm_out(pred) - reg.norm_out(Z[:, L:])
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


# ------------------------------------------------------------ inference

def _step(reg: LstmRegressor, x, state: LstmState):
    inp = x
    for l, cell in enumerate(reg.layers):
        H = cell.cell_dim
        z = cell.W @ inp + cell.U @ state.h[l] + cell.b
        s = _sigmoid(z[: 3 * H])
        g = np.tanh(z[3 * H :])
        c = s[H : 2 * H] * state.c[l] + s[:H] * g
        h = s[2 * H :] * np.tanh(c)
        state.h[l], state.c[l] = h, c
        inp = h
    y = reg.head.weights @ inp + reg.head.bias
    lat = x[reg.n_forcing :]
    if reg.residual:
        y = reg.delta_scale * y + _base(reg, lat, state.x_prev)
    state.x_prev = lat.copy()
    return y


def warm_up(reg: LstmRegressor, forcing, latents, state: LstmState | None = None, initial_latent=None) -> LstmState:
    """Run teacher-forced over a known history and return the resulting state.

    ``initial_latent`` is the latent preceding the history (default the
    rest latent) and forms the autoregressive input of the first step.
    """
    state = state.copy() if state is not None else LstmState.zeros(reg.cell_dims)
    X, _ = _prepare(reg, forcing, latents, 0)
    if initial_latent is not None and reg.autoregressive:
        X[0, reg.n_forcing :] = (np.asarray(initial_latent, dtype=float) - reg.out_mean) / reg.out_std
    for t in range(X.shape[0]):
        _step(reg, X[t], state)
    return state


def predict_free_running(
    reg: LstmRegressor,
    forcing,
    initial_latent=None,
    initial_state: LstmState | None = None,
    from_rest: bool = False,
):
    """Simulate latent trajectories by repeated one-step-ahead prediction.

    Each prediction is fed back as the autoregressive input of the next
    step and the recurrent state is carried throughout.  ``initial_latent``
    (physical units) is the latent preceding the first forcing sample and
    defaults to the rest latent.  With ``from_rest`` the state is first
    warmed up over ``lookback`` rest rows, matching the front padding used
    in training.  Returns ``(latents k x T, final_state)``.
    """
    F = np.atleast_2d(np.asarray(forcing, dtype=float))
    if F.shape[0] != reg.n_forcing:
        raise ContractViolation(f"regressor expects {reg.n_forcing} forcing channels, got {F.shape[0]}")
    state = initial_state.copy() if initial_state is not None else LstmState.zeros(reg.cell_dims)
    if from_rest:
        L = reg.lookback
        state = warm_up(reg, np.zeros((reg.n_forcing, L)), np.repeat(reg.rest_latent[:, None], L, axis=1), state)
    prev = reg.rest_latent if initial_latent is None else np.asarray(initial_latent, dtype=float)
    prev_n = (prev - reg.out_mean) / reg.out_std
    Fn = reg.norm_in(F)
    T = F.shape[1]
    out = np.empty((reg.latent_dim, T))
    for t in range(T):
        x = np.concatenate([Fn[:, t], prev_n]) if reg.autoregressive else Fn[:, t]
        y = _step(reg, x, state)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"prediction became non-finite at step {t}", step=t)
        out[:, t] = y
        prev_n = y
    return reg.denorm_out(out), state
