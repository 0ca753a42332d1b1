"""Reduced-order model: autoencoder compression plus latent LSTM dynamics.

Building a ROM trains the autoencoder on pooled displacement snapshots,
encodes every training trajectory, then fits the regressor on
``(forcing, latents)`` pairs.  Prediction runs the regressor free and
decodes the latent trajectory back to all DOFs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autoencoder as ae
from . import lstm
from .errors import ContractViolation, MissingArtifactError
from .simulation import ForcingSignal, Trajectory
from .systems import MdofSystem, linear_spring_force, nonlinear_force

__all__ = [
    "RomModel",
    "EvalReport",
    "build_rom",
    "rom_predict",
    "predict_latents",
    "evaluate",
    "nmse",
    "rms_nonlinearity_ratio",
    "interpretation_export",
    "digest_arrays",
    "config_digest",
]


def digest_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def config_digest(cfg) -> str:
    data = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=list).encode()).hexdigest()


@dataclass(eq=False)
class RomModel:
    autoencoder: ae.AutoencoderModel
    regressor: lstm.LstmRegressor
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regressor.latent_dim != self.autoencoder.bottleneck_dim:
            raise ContractViolation(
                f"regressor predicts {self.regressor.latent_dim} latents, "
                f"autoencoder bottleneck is {self.autoencoder.bottleneck_dim}"
            )

    @property
    def n_dof(self) -> int:
        return self.autoencoder.n_dof

    @property
    def n_forcing(self) -> int:
        return self.regressor.n_forcing

    def save(self, directory) -> list[Path]:
        """Write ``autoencoder.nnm``, ``regressor.nnm`` and ``rom.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "autoencoder.nnm", d / "regressor.nnm", d / "rom.json"]
        self.autoencoder.save(paths[0])
        self.regressor.save(paths[1])
        paths[2].write_text(json.dumps(self.provenance, sort_keys=True, indent=2) + "\n")
        return paths

    @classmethod
    def load(cls, directory) -> "RomModel":
        d = Path(directory)
        for name in ("autoencoder.nnm", "regressor.nnm"):
            if not (d / name).exists():
                raise MissingArtifactError(f"{d / name} not found")
        prov = json.loads((d / "rom.json").read_text()) if (d / "rom.json").exists() else {}
        return cls(ae.AutoencoderModel.load(d / "autoencoder.nnm"), lstm.LstmRegressor.load(d / "regressor.nnm"), prov)


def _forcing_array(forcing) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(forcing, "samples", forcing), dtype=float))


def build_rom(
    train_trajs: Sequence[Trajectory],
    bottleneck: int,
    ae_config: ae.AeConfig | None = None,
    lstm_config: lstm.LstmConfig | None = None,
    autoencoder: ae.AutoencoderModel | None = None,
    validation: Sequence[Trajectory] | None = None,
) -> RomModel:
    """Train the autoencoder and the latent regressor on ``train_trajs``.

    Each trajectory is an independent sequence for the regressor.  A
    pre-trained ``autoencoder`` skips the first stage.  ``validation``
    trajectories (scored free-running from rest) select the regressor
    checkpoint when ``lstm_config.val_every`` is set.
    """
    trajs = list(train_trajs)
    if not trajs:
        raise ContractViolation("need at least one training trajectory")
    if len({t.n_dof for t in trajs}) != 1 or len({t.forcing.n_channels for t in trajs}) != 1:
        raise ContractViolation("training trajectories must share n_dof and forcing channels")
    acfg = ae_config or ae.AeConfig()
    lcfg = lstm_config or lstm.LstmConfig()
    if autoencoder is None:
        autoencoder = ae.build_paper_ae(trajs[0].n_dof, bottleneck, seed=acfg.seed)
        autoencoder, _ = ae.train_ae(autoencoder, trajs, acfg)
    elif autoencoder.bottleneck_dim != bottleneck:
        raise ContractViolation("supplied autoencoder has a different bottleneck")

    seqs = [(t.forcing.samples, ae.encode(autoencoder, t.displacements)) for t in trajs]
    reg = lstm.build_regressor(
        trajs[0].forcing.n_channels,
        bottleneck,
        cells=lcfg.cells,
        lookback=lcfg.lookback,
        autoregressive=lcfg.autoregressive,
        seed=lcfg.seed,
        forget_bias=lcfg.forget_bias,
        residual=lcfg.residual,
        residual_order=lcfg.residual_order,
    )
    reg.rest_latent = ae.encode(autoencoder, np.zeros((autoencoder.n_dof, 1)))[:, 0]
    val = None
    if validation:
        val = [(t.forcing.samples, ae.encode(autoencoder, t.displacements)) for t in validation]
    reg, _ = lstm.train_teacher_forced(reg, seqs, lcfg, validation=val)

    provenance = {
        "ae_config": config_digest(acfg),
        "lstm_config": config_digest(lcfg),
        "ae_seed": acfg.seed,
        "lstm_seed": lcfg.seed,
        "bottleneck": bottleneck,
        "train_data": digest_arrays(*[a for t in trajs for a in (t.displacements, t.forcing.samples)]),
    }
    return RomModel(autoencoder, reg, provenance)


def predict_latents(
    rom: RomModel,
    forcing,
    prefix: Trajectory | None = None,
    warmup: int | None = None,
    seed_latent: str = "truth",
) -> np.ndarray:
    """Free-running latent prediction for ``forcing``.

    With ``prefix`` (a trajectory ending just before the forcing starts)
    the state is warmed up teacher-forced over its last ``warmup`` steps
    (default the regressor lookback) starting from a zero state; the first
    fed-back latent is the encoded last prefix sample (``seed_latent="truth"``)
    or the rest latent (``"rest"``).  Without ``prefix`` the model starts
    at rest with a zero-padded warm-up.
    """
    F = _forcing_array(forcing)
    reg = rom.regressor
    if F.shape[0] != reg.n_forcing:
        raise ContractViolation(f"ROM takes {reg.n_forcing} forcing channels, got {F.shape[0]}")
    if prefix is None:
        Z, _ = lstm.predict_free_running(reg, F, from_rest=True)
        return Z
    if seed_latent not in ("truth", "rest"):
        raise ContractViolation("seed_latent must be 'truth' or 'rest'")
    W = reg.lookback if warmup is None else int(warmup)
    if W < 1 or W > prefix.steps:
        raise ContractViolation(f"warm-up of {W} steps needs a prefix at least that long")
    start = prefix.steps - W
    window = prefix.window(max(start - 1, 0), prefix.steps)
    Zw = ae.encode(rom.autoencoder, window.displacements)
    Fw = window.forcing.samples
    if start > 0:
        state = lstm.warm_up(reg, Fw[:, 1:], Zw[:, 1:], initial_latent=Zw[:, 0])
    else:
        state = lstm.warm_up(reg, Fw, Zw)
    first = Zw[:, -1] if seed_latent == "truth" else reg.rest_latent
    Z, _ = lstm.predict_free_running(reg, F, initial_latent=first, initial_state=state)
    return Z


def rom_predict(rom: RomModel, forcing: ForcingSignal, prefix: Trajectory | None = None, **kw) -> Trajectory:
    """Predict the full displacement field for ``forcing`` (see ``predict_latents``)."""
    Z = predict_latents(rom, forcing, prefix=prefix, **kw)
    return Trajectory(forcing.dt, ae.decode(rom.autoencoder, Z), forcing)


# ------------------------------------------------------------ evaluation


@dataclass(eq=False)
class EvalReport:
    per_dof_mse: np.ndarray
    signal_power: np.ndarray
    nonlinearity_ratio: np.ndarray | None = None

    def __post_init__(self):
        self.per_dof_mse = np.asarray(self.per_dof_mse, dtype=float)
        self.signal_power = np.asarray(self.signal_power, dtype=float)
        if self.per_dof_mse.shape != self.signal_power.shape:
            raise ContractViolation("per-dof MSE and signal power counts differ")
        if self.nonlinearity_ratio is not None:
            self.nonlinearity_ratio = np.asarray(self.nonlinearity_ratio, dtype=float)
            if self.nonlinearity_ratio.shape != self.per_dof_mse.shape:
                raise ContractViolation("nonlinearity ratio count differs from n_dof")

    @property
    def n_dof(self) -> int:
        return self.per_dof_mse.size

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.per_dof_mse))

    @property
    def nmse(self) -> float:
        power = float(np.mean(self.signal_power))
        if power <= 0:
            raise ContractViolation("truth has zero signal power; NMSE is undefined")
        return self.mean_mse / power

    def to_dict(self) -> dict:
        out = {
            "n_dof": self.n_dof,
            "mean_mse": self.mean_mse,
            "nmse": self.nmse,
            "per_dof_mse": self.per_dof_mse.tolist(),
            "signal_power": self.signal_power.tolist(),
        }
        if self.nonlinearity_ratio is not None:
            out["nonlinearity_ratio"] = self.nonlinearity_ratio.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["dof", "mse", "signal_power"]
            if self.nonlinearity_ratio is not None:
                cols.append("nonlinearity_ratio")
            w.writerow(cols)
            for i in range(self.n_dof):
                row = [i, repr(float(self.per_dof_mse[i])), repr(float(self.signal_power[i]))]
                if self.nonlinearity_ratio is not None:
                    row.append(repr(float(self.nonlinearity_ratio[i])))
                w.writerow(row)


def _displacements(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(x, "displacements", x), dtype=float))


def evaluate(predicted, truth, nonlinearity_ratio=None) -> EvalReport:
    """Per-dof MSE, mean MSE and NMSE of ``predicted`` against ``truth``.

    NMSE is the mean MSE over DOFs divided by the mean over DOFs of the
    truth's power ``mean(x**2)``.
    """
    P, T = _displacements(predicted), _displacements(truth)
    if P.shape != T.shape:
        raise ContractViolation(f"prediction {P.shape} and truth {T.shape} are not aligned")
    report = EvalReport(np.mean((P - T) ** 2, axis=1), np.mean(T * T, axis=1), nonlinearity_ratio)
    report.nmse  # fail early on zero power
    return report


def nmse(predicted, truth) -> float:
    return evaluate(predicted, truth).nmse


def rms_nonlinearity_ratio(sys: MdofSystem, traj: Trajectory) -> np.ndarray:
    """Per-dof RMS of the net nonlinear force over RMS of the net linear spring force."""
    U = traj.displacements
    if U.shape[0] != sys.n_dof:
        raise ContractViolation(f"trajectory has {U.shape[0]} dofs, system {sys.n_dof}")
    rms = lambda f: np.sqrt(np.mean(f * f, axis=1))
    lin = rms(linear_spring_force(sys, U))
    if np.any(lin == 0):
        raise ContractViolation("linear spring force has zero RMS at some dof")
    return rms(nonlinear_force(sys, U, traj.hysteretic)) / lin


def interpretation_export(
    sweep: ae.SweepResult,
    traj: Trajectory,
    sizes: Sequence[int],
    dofs: Sequence[int],
    windows: Sequence[tuple[float, float]],
    path=None,
) -> list[tuple]:
    """Reconstructions of ``traj`` from each swept bottleneck size.

    Rows are ``(size, window_start, window_stop, t, dof, truth, reconstructed)``
    for every requested dof and every sample with ``start <= t < stop``;
    they are also written as CSV when ``path`` is given.
    """
    models = {k: sweep.model(k) for k in sizes}
    for d in dofs:
        if not 0 <= d < traj.n_dof:
            raise ContractViolation(f"dof {d} outside 0..{traj.n_dof - 1}")
    t = traj.times
    rows = []
    for k in sizes:
        R = ae.reconstruct(models[k], traj.displacements)
        for start, stop in windows:
            idx = np.nonzero((t >= start - 1e-9) & (t < stop - 1e-9))[0]
            for d in dofs:
                for j in idx:
                    rows.append((k, start, stop, float(t[j]), d, float(traj.displacements[d, j]), float(R[d, j])))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "window_start", "window_stop", "t", "dof", "truth", "reconstructed"])
            for k, a, b, tj, d, x, r in rows:
                w.writerow([k, repr(float(a)), repr(float(b)), repr(tj), d, repr(x), repr(r)])
    return rows
