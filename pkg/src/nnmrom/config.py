"""Declarative run configuration (YAML) and the bundled presets.

A run file has the sections ``system``, ``forcing``, ``integrator``,
``split``, ``ae``, ``lstm`` and ``output``; see ``docs/run_config.md``.
Values resolve as command-line overrides, then the file, then defaults.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .autoencoder import AeConfig
from .errors import ContractViolation
from .lstm import LstmConfig
from .simulation import (
    ForcingSignal,
    NewmarkParams,
    Trajectory,
    integrate_newmark,
    integrate_rk4,
    make_filtered_noise,
    make_sinusoid,
)
from .systems import MdofSystem, system_from_dict

__all__ = ["RunConfig", "load_run_config", "list_presets", "preset_path", "apply_overrides"]

DEFAULTS: dict[str, Any] = {
    "name": "run",
    "forcing": {
        "type": "filtered_noise",
        "dt": 0.01,
        "cutoff_hz": 7.5,
        "variance": 1.0,
        "order": 4,
        "warmup_s": 1.0,
        "seed": 0,
    },
    "integrator": {"method": "rk4"},
    "split": {"train": 5000, "test": 1000},
    "ae": {
        "bottleneck": 8,
        "restarts": 5,
        "sizes": None,
        "lr": 1e-3,
        "max_epochs": 2000,
        "batch_size": 128,
        "patience": 50,
        "val_fraction": 0.1,
        "seed": 0,
        "activation": "tanh",
    },
    "lstm": {"mode": "continue", "warmup": None, "seed_latent": "truth", "val_windows": 0},
    "output": {"dir": None},
}

_AE_TRAIN_KEYS = {f.name for f in dataclasses.fields(AeConfig)}
_LSTM_KEYS = {f.name for f in dataclasses.fields(LstmConfig)}
_LSTM_EXTRA = {"mode", "warmup", "seed_latent", "val_windows", "val_length"}


class ConfigError(ContractViolation):
    """A run file or override is malformed; the message names the source and key."""


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(data: dict, overrides: Mapping[str, Any]) -> dict:
    """Set dotted keys (``"lstm.lookback"``) on a nested mapping copy."""
    out = copy.deepcopy(data)
    for key, value in overrides.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    data: dict
    source: str = "<defaults>"
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.validate()

    # -------------------------------------------------------------- access

    def section(self, name: str) -> dict:
        return self.data.get(name) or {}

    @property
    def name(self) -> str:
        return str(self.data.get("name", "run"))

    def _fail(self, key: str, msg: str):
        raise ConfigError(f"{self.source}: {key}: {msg}")

    def validate(self) -> None:
        f = self.section("forcing")
        if "system" not in self.data and "system_file" not in self.data:
            self._fail("system", "a 'system' section or 'system_file' is required")
        if f.get("type") not in ("filtered_noise", "sinusoid"):
            self._fail("forcing.type", "must be 'filtered_noise' or 'sinusoid'")
        if not float(f.get("dt", 0)) > 0:
            self._fail("forcing.dt", "must be positive")
        if f["type"] == "filtered_noise":
            nyq = 0.5 / float(f["dt"])
            if not 0 < float(f.get("cutoff_hz", 0)) < nyq:
                self._fail("forcing.cutoff_hz", f"must lie strictly between 0 and the Nyquist frequency {nyq:g} Hz")
            if not float(f.get("variance", 0)) > 0:
                self._fail("forcing.variance", "must be positive")
        else:
            for key in ("freq_hz", "amplitudes", "train_scales", "test_scales"):
                if key not in f:
                    self._fail(f"forcing.{key}", "required for sinusoidal forcing")
        if self.section("integrator").get("method") not in ("rk4", "newmark"):
            self._fail("integrator.method", "must be 'rk4' or 'newmark'")
        sp = self.section("split")
        for key in ("train", "test"):
            if int(sp.get(key, 0)) < 1:
                self._fail(f"split.{key}", "must be >= 1")
        a = self.section("ae")
        if int(a.get("bottleneck", 0)) < 1:
            self._fail("ae.bottleneck", "must be >= 1")
        if int(a.get("restarts", 0)) < 1:
            self._fail("ae.restarts", "must be >= 1")
        unknown = set(self.section("lstm")) - _LSTM_KEYS - _LSTM_EXTRA
        if unknown:
            self._fail("lstm", f"unknown keys {sorted(unknown)}")
        if self.section("lstm").get("mode") not in ("continue", "from_rest"):
            self._fail("lstm.mode", "must be 'continue' or 'from_rest'")
        try:
            self.ae_config()
            self.lstm_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.source}: {exc}") from None

    # -------------------------------------------------------------- builders

    def system(self) -> MdofSystem:
        if "system" in self.data:
            spec = self.data["system"]
            where = self.source
        else:
            path = (self.base_dir / self.data["system_file"]).resolve()
            if not path.exists():
                self._fail("system_file", f"{path} does not exist")
            spec = _read_yaml(path)
            where = str(path)
        try:
            return system_from_dict(spec)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{where}: system: missing or malformed entry {exc}") from None
        except ContractViolation as exc:
            raise ConfigError(f"{where}: system: {exc}") from None

    def ae_config(self) -> AeConfig:
        a = self.section("ae")
        return AeConfig(**{k: a[k] for k in _AE_TRAIN_KEYS if k in a})

    def lstm_config(self) -> LstmConfig:
        l = dict(self.section("lstm"))
        kw = {k: l[k] for k in _LSTM_KEYS if k in l}
        if "cells" in kw:
            kw["cells"] = tuple(int(c) for c in kw["cells"])
        return LstmConfig(**kw)

    def sweep_sizes(self, n_dof: int) -> list[int]:
        sizes = self.section("ae").get("sizes")
        return list(range(1, n_dof + 1)) if sizes is None else [int(k) for k in sizes]

    def output_dir(self, root: str | Path | None = None) -> Path:
        out = self.section("output").get("dir")
        if out:
            return (self.base_dir / out).resolve() if not Path(out).is_absolute() else Path(out)
        return Path(root or ".") / self.name

    # -------------------------------------------------------------- data

    def forcings(self, n_channels: int) -> tuple[list[ForcingSignal], list[ForcingSignal]]:
        """Training and test forcing signals."""
        f = self.section("forcing")
        sp = self.section("split")
        n_train, n_test = int(sp["train"]), int(sp["test"])
        dt = float(f["dt"])
        if f["type"] == "filtered_noise":
            sig = make_filtered_noise(
                n_channels,
                n_train + n_test,
                dt,
                float(f["cutoff_hz"]),
                float(f["variance"]),
                seed=int(f.get("seed", 0)),
                order=int(f.get("order", 4)),
                warmup_s=float(f.get("warmup_s", 1.0)),
            )
            return [sig.window(0, n_train)], [sig.window(n_train, n_train + n_test)]
        amps = [float(a) for a in f["amplitudes"]]
        if len(amps) != n_channels:
            self._fail("forcing.amplitudes", f"need one amplitude per forced dof ({n_channels})")
        base = lambda steps: make_sinusoid(n_channels, steps, dt, float(f["freq_hz"]), amps, f.get("phase_offsets"))
        train = [base(n_train).scaled(float(s)) for s in f["train_scales"]]
        test = [base(n_test).scaled(float(s)) for s in f["test_scales"]]
        return train, test

    def simulate(self) -> tuple[MdofSystem, list[Trajectory], list[Trajectory]]:
        """Integrate the system for every forcing signal.

        Filtered-noise runs are one contiguous simulation split into a
        training prefix and a test continuation; sinusoidal runs start
        each amplitude from rest.
        """
        sys = self.system()
        if not sys.force_map:
            self._fail("system.force_map", "at least one forced dof is required")
        train_f, test_f = self.forcings(len(sys.force_map))
        integ = self.section("integrator")

        def run(forcing):
            if integ["method"] == "rk4":
                return integrate_rk4(sys, sys.zero_state(), forcing)
            params = NewmarkParams(**{k: v for k, v in integ.items() if k != "method"})
            return integrate_newmark(sys, sys.zero_state(), forcing, params)

        if self.section("forcing")["type"] == "filtered_noise":
            whole = ForcingSignal(train_f[0].dt, _hstack(train_f[0], test_f[0]), train_f[0].channel_map)
            traj = run(whole)
            n = train_f[0].steps
            return sys, [traj.window(0, n)], [traj.window(n, traj.steps)]
        return sys, [run(f) for f in train_f], [run(f) for f in test_f]


def _hstack(a: ForcingSignal, b: ForcingSignal):
    return np.hstack([a.samples, b.samples])


def _read_yaml(path: Path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def list_presets() -> list[str]:
    pkg = resources.files("nnmrom") / "presets"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".yaml"))


def preset_path(name: str) -> Path:
    path = Path(str(resources.files("nnmrom") / "presets" / f"{name}.yaml"))
    if not path.exists():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return path


def load_run_config(source: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Load a run file (or a preset by name) and apply dotted-key overrides."""
    path = Path(source)
    if not path.exists() and not str(source).endswith((".yaml", ".yml")):
        path = preset_path(str(source))
    if not path.exists():
        raise ConfigError(f"{path}: file not found")
    data = _merge(DEFAULTS, _read_yaml(path))
    data = apply_overrides(data, overrides or {})
    return RunConfig(data, str(path), path.parent)
