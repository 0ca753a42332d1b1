"""Bottleneck autoencoder for output-only latent (NNM-like) coordinates."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .errors import ContractViolation, MissingArtifactError, TrainingError

__all__ = [
    "AeConfig",
    "AutoencoderModel",
    "build_paper_ae",
    "train_ae",
    "fine_tune",
    "encode",
    "decode",
    "reconstruct",
    "pca_reconstruction_mse",
    "bottleneck_sweep",
    "SweepResult",
]


@dataclass(frozen=True)
class AeConfig:
    lr: float = 1e-3
    max_epochs: int = 2000
    batch_size: int = 128
    patience: int = 50
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ContractViolation("batch_size, max_epochs and patience must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ContractViolation("val_fraction must lie in [0, 1)")


@dataclass(eq=False)
class AutoencoderModel:
    encoder: list
    decoder: list
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.std = np.asarray(self.std, dtype=float).reshape(-1)
        n = self.encoder[0].n_in
        if self.encoder[-1].n_out != self.decoder[0].n_in:
            raise ContractViolation("encoder output and decoder input widths differ")
        if self.decoder[-1].n_out != n or self.mean.size != n or self.std.size != n:
            raise ContractViolation("outer widths and normalization must all equal n_dof")
        if not np.all(self.std > 0):
            raise ContractViolation("normalization std must be positive")

    @property
    def n_dof(self) -> int:
        return self.encoder[0].n_in

    @property
    def bottleneck_dim(self) -> int:
        return self.encoder[-1].n_out

    @property
    def layers(self) -> list:
        return self.encoder + self.decoder

    def params(self) -> list[np.ndarray]:
        return nn.stack_params(self.layers)

    def normalize(self, X):
        return (X - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, Xn):
        return Xn * self.std[:, None] + self.mean[:, None]

    def copy(self) -> "AutoencoderModel":
        clone = lambda ls: [nn.DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in ls]
        return AutoencoderModel(clone(self.encoder), clone(self.decoder), self.mean.copy(), self.std.copy())

    def save(self, path, meta=None) -> None:
        header = {
            "kind": "autoencoder",
            "encoder": nn.layers_to_spec(self.encoder),
            "decoder": nn.layers_to_spec(self.decoder),
            "meta": meta or {},
        }
        nn.save_container(path, header, self.params() + [self.mean, self.std])

    @classmethod
    def load(cls, path) -> "AutoencoderModel":
        header, arrays = nn.load_container(path)
        if header.get("kind") != "autoencoder":
            raise ContractViolation(f"{path} does not hold an autoencoder")
        ne = 2 * len(header["encoder"])
        nd = 2 * len(header["decoder"])
        enc = nn.layers_from_spec(header["encoder"], arrays[:ne])
        dec = nn.layers_from_spec(header["decoder"], arrays[ne : ne + nd])
        return cls(enc, dec, arrays[ne + nd], arrays[ne + nd + 1])


def build_paper_ae(n_dof: int, bottleneck: int, seed: int = 0, activation: str = "tanh"):
    """Five-layer autoencoder ``n -> n -> k -> n -> n``.

    Linear input, ``activation`` on the two hidden layers and the
    bottleneck, linear output.  ``activation="linear"`` gives the
    PCA-equivalent network.
    """
    if not 1 <= bottleneck <= n_dof:
        raise ContractViolation(f"bottleneck must lie in 1..{n_dof}, got {bottleneck}")
    rng = np.random.default_rng(seed)
    encoder = [
        nn.DenseLayer.init(n_dof, n_dof, activation, rng),
        nn.DenseLayer.init(n_dof, bottleneck, activation, rng),
    ]
    decoder = [
        nn.DenseLayer.init(bottleneck, n_dof, activation, rng),
        nn.DenseLayer.init(n_dof, n_dof, "linear", rng),
    ]
    return AutoencoderModel(encoder, decoder, np.zeros(n_dof), np.ones(n_dof))


def _pool(data) -> np.ndarray:
    """Stack displacement snapshots from trajectories or raw ``n x T`` arrays."""
    if isinstance(data, np.ndarray):
        return np.atleast_2d(data).astype(float)
    mats = [getattr(d, "displacements", d) for d in data]
    n = {np.shape(m)[0] for m in mats}
    if len(n) != 1:
        raise ContractViolation("trajectories must share n_dof")
    return np.hstack([np.asarray(m, dtype=float) for m in mats])


@dataclass
class AeHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def smoothed(self) -> np.ndarray:
        ref = self.val if self.val else self.train
        return np.minimum.accumulate(np.asarray(ref)) if ref else np.zeros(0)


def _batch_loss_grads(model, Xb):
    acts = nn.stack_forward(model.layers, Xb, keep=True)
    loss, dy = nn.mse_loss(acts[-1], Xb)
    _, grads = nn.stack_backward(model.layers, acts, dy)
    return loss, grads


def _normalized_mse(model, Xn):
    return float(np.mean((nn.stack_forward(model.layers, Xn) - Xn) ** 2))


def train_ae(model: AutoencoderModel, data, config: AeConfig | None = None, refit_normalization=True):
    """Minimise the mean squared reconstruction error on pooled snapshots.

    Columns are treated as independent samples.  With
    ``refit_normalization`` the per-channel mean and std are taken from
    ``data``.  A random ``val_fraction`` of columns drives early stopping;
    the best validation parameters are restored.  Returns ``(model, history)``.
    """
    cfg = config or AeConfig()
    X = _pool(data)
    if X.shape[0] != model.n_dof:
        raise ContractViolation(f"data has {X.shape[0]} channels, model expects {model.n_dof}")
    if refit_normalization:
        std = X.std(axis=1)
        model.mean = X.mean(axis=1)
        model.std = np.where(std > 0, std, 1.0)
    Xn = model.normalize(X)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(X.shape[1])
    n_val = int(round(cfg.val_fraction * X.shape[1]))
    val, train = Xn[:, perm[:n_val]], Xn[:, perm[n_val:]]

    params = model.params()
    opt = nn.Adam(lr=cfg.lr)
    hist = AeHistory()
    best = np.inf
    best_params = [p.copy() for p in params]
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train.shape[1])
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            Xb = train[:, order[start : start + cfg.batch_size]]
            loss, grads = _batch_loss_grads(model, Xb)
            if not np.isfinite(loss):
                raise TrainingError(f"autoencoder loss became non-finite in epoch {epoch}")
            opt.step(params, grads)
            total += loss * Xb.shape[1]
        hist.train.append(total / train.shape[1])
        score = _normalized_mse(model, val) if n_val else hist.train[-1]
        if n_val:
            hist.val.append(score)
        if not np.isfinite(score):
            raise TrainingError(f"autoencoder validation loss non-finite in epoch {epoch}")
        if score < best:
            best, stale, hist.best_epoch = score, 0, epoch
            best_params = [p.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, b in zip(params, best_params):
        p[...] = b
    return model, hist


def fine_tune(model: AutoencoderModel, data, config: AeConfig | None = None, lr_factor=0.1):
    """Continue training a chosen model at a reduced learning rate, keeping its scaling."""
    cfg = config or AeConfig()
    cfg = dataclasses.replace(cfg, lr=cfg.lr * lr_factor)
    return train_ae(model, data, cfg, refit_normalization=False)


def encode(model: AutoencoderModel, displacements) -> np.ndarray:
    X = np.atleast_2d(np.asarray(displacements, dtype=float))
    if X.shape[0] != model.n_dof:
        raise ContractViolation(f"expected {model.n_dof} channels, got {X.shape[0]}")
    return nn.stack_forward(model.encoder, model.normalize(X))


def decode(model: AutoencoderModel, latents) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(latents, dtype=float))
    if Z.shape[0] != model.bottleneck_dim:
        raise ContractViolation(f"expected {model.bottleneck_dim} latents, got {Z.shape[0]}")
    return model.denormalize(nn.stack_forward(model.decoder, Z))


def reconstruct(model: AutoencoderModel, displacements) -> np.ndarray:
    return decode(model, encode(model, displacements))


def normalized_mse(model: AutoencoderModel, displacements) -> float:
    """Reconstruction MSE measured in the model's normalized coordinates."""
    return _normalized_mse(model, model.normalize(_pool(displacements)))


def pca_reconstruction_mse(Xn, k: int, fit=None) -> float:
    """MSE of the best rank-``k`` affine reconstruction of ``Xn``.

    The mean and principal directions come from ``fit`` (default ``Xn``).
    """
    Xn = np.asarray(Xn, dtype=float)
    F = Xn if fit is None else np.asarray(fit, dtype=float)
    mu = F.mean(axis=1, keepdims=True)
    U, _, _ = np.linalg.svd(F - mu, full_matrices=False)
    P = U[:, :k]
    R = mu + P @ (P.T @ (Xn - mu))
    return float(np.mean((R - Xn) ** 2))


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)  # (bottleneck, restart, train_mse, test_mse)
    errors: list = field(default_factory=list)  # (bottleneck, restart, message)
    models: dict = field(default_factory=dict)  # bottleneck -> best AutoencoderModel

    def best(self) -> dict:
        out: dict = {}
        for k, _, _, test in self.rows:
            if np.isfinite(test) and test < out.get(k, np.inf):
                out[k] = test
        return dict(sorted(out.items()))

    def model(self, size: int) -> AutoencoderModel:
        try:
            return self.models[size]
        except KeyError:
            raise MissingArtifactError(f"no trained autoencoder for bottleneck {size}") from None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bottleneck", "restart", "train_mse", "test_mse"])
            for k, r, tr, te in self.rows:
                w.writerow([k, r, repr(float(tr)), repr(float(te))])


def bottleneck_sweep(
    n_dof: int,
    train,
    test,
    sizes: Iterable[int],
    restarts: int = 5,
    config: AeConfig | None = None,
    activation: str = "tanh",
) -> SweepResult:
    """Train ``restarts`` autoencoders per bottleneck size and score them on ``test``.

    MSEs are in normalized coordinates.  A failing cell is recorded in
    ``errors`` and the sweep continues.
    """
    cfg = config or AeConfig()
    sizes = list(sizes)
    if not sizes or restarts < 1:
        raise ContractViolation("need at least one size and one restart")
    result = SweepResult()
    best = {}
    for k in sizes:
        for r in range(restarts):
            seed = cfg.seed + 1000 * k + r
            try:
                model = build_paper_ae(n_dof, k, seed=seed, activation=activation)
                model, _ = train_ae(model, train, dataclasses.replace(cfg, seed=seed))
                tr, te = normalized_mse(model, train), normalized_mse(model, test)
            except (TrainingError, ContractViolation) as exc:
                result.errors.append((k, r, str(exc)))
                result.rows.append((k, r, float("nan"), float("nan")))
                continue
            result.rows.append((k, r, tr, te))
            if te < best.get(k, np.inf):
                best[k] = te
                result.models[k] = model
    return result
