"""Command-line entry point: ``nnmrom <verb> RUN [options]``.

``RUN`` is a run file, a bundled preset name or a ``manifest.json`` written
by an earlier command (its resolved configuration is reused).  Every verb
writes under the run directory::

    data/          simulated train/test trajectories (CSV + binary)
    sweep/         bottleneck sweep table and the best model per size
    models/        autoencoder.nnm, regressor.nnm, rom.json
    predictions/   ROM predictions for the test trajectories
    reports/       evaluation and interpretation exports
    manifest.json  resolved configuration and a sha256 for every output

Exit status is 0 on success, 1 for usage, configuration or missing-input
errors and 2 for numerical failures (divergence, non-convergence,
non-finite training loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import autoencoder as ae
from . import rom as rom_mod
from .config import ConfigError, RunConfig, _merge, apply_overrides, load_run_config
from .errors import ContractViolation, ConvergenceError, DivergenceError, MissingArtifactError, TrainingError
from .simulation import (
    Trajectory,
    load_trajectory_binary,
    load_trajectory_csv,
    save_trajectory_binary,
    save_trajectory_csv,
)

OUTPUT_ROOT_ENV = "NNMROM_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ run dir


class RunDir:
    """Paths and manifest bookkeeping for one run directory."""

    def __init__(self, root: Path, config: RunConfig):
        self.root = Path(root)
        self.config = config

    def sub(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def record(self, paths) -> None:
        """Add ``paths`` (with digests) to the manifest, keeping earlier entries."""
        files = {}
        if self.manifest_path.exists():
            files = json.loads(self.manifest_path.read_text()).get("files", {})
        for p in paths:
            rel = Path(p).resolve().relative_to(self.root.resolve()).as_posix()
            files[rel] = _sha256(p)
        # drop entries whose file has since disappeared
        files = {k: v for k, v in files.items() if (self.root / k).exists()}
        body = {"config": self.config.data, "files": dict(sorted(files.items()))}
        self.manifest_path.write_text(json.dumps(body, sort_keys=True, indent=2, default=_jsonable) + "\n")

    def trajectories(self, split: str) -> list[Trajectory]:
        d = self.root / "data"
        paths = sorted(d.glob(f"{split}_*.traj"), key=lambda p: int(p.stem.split("_")[1]))
        if not paths:
            raise MissingArtifactError(f"no {split} trajectories under {d}; run 'simulate' first")
        return [load_trajectory_binary(p) for p in paths]


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, (tuple, set)):
        return list(x)
    return str(x)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_traj(base: Path, traj: Trajectory) -> list[Path]:
    csv_path, bin_path = base.with_suffix(".csv"), base.with_suffix(".traj")
    save_trajectory_csv(csv_path, traj)
    save_trajectory_binary(bin_path, traj)
    return [csv_path, bin_path]


def _load_traj(path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} not found")
    return load_trajectory_csv(path) if path.suffix == ".csv" else load_trajectory_binary(path)


# ------------------------------------------------------------------ verbs


def cmd_simulate(run: RunDir, args) -> list[Path]:
    _, train, test = run.config.simulate()
    d = run.sub("data")
    out = []
    for split, trajs in (("train", train), ("test", test)):
        for i, tr in enumerate(trajs):
            out += _write_traj(d / f"{split}_{i}", tr)
    print(f"simulated {len(train)} train and {len(test)} test trajectories -> {d}")
    return out


def _sweep_one(payload):
    k, train, test, restarts, cfg, act = payload
    return k, ae.bottleneck_sweep(train[0].n_dof, train, test, [k], restarts, cfg, activation=act)


def cmd_sweep(run: RunDir, args) -> list[Path]:
    train, test = run.trajectories("train"), run.trajectories("test")
    cfg = run.config
    sizes = cfg.sweep_sizes(train[0].n_dof)
    restarts = int(cfg.section("ae")["restarts"])
    acfg = cfg.ae_config()
    act = cfg.section("ae").get("activation", "tanh")
    jobs = [(k, train, test, restarts, acfg, act) for k in sizes]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            parts = dict(pool.map(_sweep_one, jobs))
    else:
        parts = dict(map(_sweep_one, jobs))
    result = ae.SweepResult()
    for k in sizes:  # merge in size order so the table does not depend on scheduling
        result.rows += parts[k].rows
        result.errors += parts[k].errors
        result.models.update(parts[k].models)
    d = run.sub("sweep")
    out = [d / "sweep.csv"]
    result.to_csv(out[0])
    for k, m in sorted(result.models.items()):
        p = d / f"ae_{k}.nnm"
        m.save(p, meta={"bottleneck": k})
        out.append(p)
    for k, r, msg in result.errors:
        print(f"warning: size {k} restart {r} failed: {msg}", file=sys.stderr)
    for k, mse in result.best().items():
        print(f"bottleneck {k:3d}  best test mse {mse:.4e}")
    return out


def cmd_train_ae(run: RunDir, args) -> list[Path]:
    train = run.trajectories("train")
    k = int(run.config.section("ae")["bottleneck"])
    acfg = run.config.ae_config()
    act = run.config.section("ae").get("activation", "tanh")
    model = ae.build_paper_ae(train[0].n_dof, k, seed=acfg.seed, activation=act)
    model, hist = ae.train_ae(model, train, acfg)
    p = run.sub("models") / "autoencoder.nnm"
    model.save(p, meta={"bottleneck": k, "epochs": len(hist.train), "best_epoch": hist.best_epoch})
    test = run.trajectories("test")
    print(f"autoencoder {k}: train mse {ae.normalized_mse(model, train):.4e}  test mse {ae.normalized_mse(model, test):.4e}")
    return [p]


def _validation_windows(trajs: list[Trajectory], count: int, length: int) -> list[Trajectory]:
    """``count`` evenly spaced in-sample windows used to pick the regressor checkpoint."""
    out = []
    for tr in trajs:
        if tr.steps <= length or count < 1:
            continue
        for a in np.linspace(0, tr.steps - length, count + 1)[1:].astype(int):
            out.append(tr.window(int(a), int(a) + length))
    return out


def cmd_train_lstm(run: RunDir, args) -> list[Path]:
    train = run.trajectories("train")
    d = run.sub("models")
    if not (d / "autoencoder.nnm").exists():
        raise MissingArtifactError(f"{d / 'autoencoder.nnm'} not found; run 'train-ae' first")
    model = ae.AutoencoderModel.load(d / "autoencoder.nnm")
    lcfg = run.config.lstm_config()
    sec = run.config.section("lstm")
    val = None
    if int(sec.get("val_windows", 0)) > 0 and lcfg.val_every > 0:
        val = _validation_windows(train, int(sec["val_windows"]), int(sec.get("val_length", 1000)))
    rom = rom_mod.build_rom(
        train, model.bottleneck_dim, run.config.ae_config(), lcfg, autoencoder=model, validation=val or None
    )
    rom.provenance["run_config"] = rom_mod.config_digest(run.config.data)
    paths = rom.save(d)
    print(f"regressor trained: cells {rom.regressor.cell_dims}, lookback {rom.regressor.lookback}")
    return paths


def _predict_all(run: RunDir, rom) -> list[Trajectory]:
    sec = run.config.section("lstm")
    test = run.trajectories("test")
    if sec["mode"] == "from_rest":
        return [rom_mod.rom_predict(rom, t.forcing) for t in test]
    train = run.trajectories("train")
    if len(train) != len(test):
        raise ContractViolation("continue mode pairs each test trajectory with the train run it continues")
    return [
        rom_mod.rom_predict(rom, te.forcing, prefix=tr, warmup=sec.get("warmup"), seed_latent=sec["seed_latent"])
        for tr, te in zip(train, test)
    ]


def cmd_rom_predict(run: RunDir, args) -> list[Path]:
    rom = rom_mod.RomModel.load(run.root / "models")
    d = run.sub("predictions")
    out = []
    for i, p in enumerate(_predict_all(run, rom)):
        out += _write_traj(d / f"test_{i}", p)
    print(f"wrote {len(out) // 2} predictions -> {d}")
    return out


def cmd_evaluate(run: RunDir | None, args) -> list[Path]:
    if args.predicted or args.truth:
        if not (args.predicted and args.truth):
            raise UsageError("--predicted and --truth go together")
        pairs = [(_load_traj(args.predicted), _load_traj(args.truth))]
    else:
        pred_dir = run.root / "predictions"
        preds = sorted(pred_dir.glob("test_*.traj"), key=lambda p: int(p.stem.split("_")[1]))
        if not preds:
            raise MissingArtifactError(f"no predictions under {pred_dir}; run 'rom-predict' first")
        pairs = list(zip([load_trajectory_binary(p) for p in preds], run.trajectories("test")))
    reports = []
    for pred, truth in pairs:
        ratio = None
        if run is not None:
            sys_ = run.config.system()
            if sys_.cubic_springs or sys_.bouc_wen_links:
                ratio = rom_mod.rms_nonlinearity_ratio(sys_, truth)
        reports.append(rom_mod.evaluate(pred, truth, nonlinearity_ratio=ratio))
    out_dir = Path(args.out) if args.out and run is None else (run.sub("reports") if run else Path("."))
    out_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for i, rep in enumerate(reports):
        j, c = out_dir / f"eval_{i}.json", out_dir / f"eval_{i}.csv"
        rep.write_json(j)
        rep.write_csv(c)
        out += [j, c]
        print(f"test {i}: mean mse {rep.mean_mse:.4e}  nmse {rep.nmse:.4e}")
    if run is not None:
        floors = []
        model = run.root / "models" / "autoencoder.nnm"
        if model.exists():
            m = ae.AutoencoderModel.load(model)
            for _, truth in pairs:
                floors.append(rom_mod.nmse(ae.reconstruct(m, truth.displacements), truth))
        summary = {
            "nmse": [r.nmse for r in reports],
            "mean_mse": [r.mean_mse for r in reports],
            "ae_floor_nmse": floors,
        }
        s = out_dir / "summary.json"
        s.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        out.append(s)
    return out


def _pairs(text: str, cast=float) -> list:
    out = []
    for part in text.split(","):
        a, _, b = part.partition(":")
        out.append((cast(a), cast(b)))
    return out


def cmd_export_interpretation(run: RunDir, args) -> list[Path]:
    d = run.root / "sweep"
    if not (d / "sweep.csv").exists():
        raise MissingArtifactError(f"{d / 'sweep.csv'} not found; run 'sweep' first")
    sweep = ae.SweepResult()
    for p in d.glob("ae_*.nnm"):
        sweep.models[int(p.stem.split("_")[1])] = ae.AutoencoderModel.load(p)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else sorted(sweep.models)
    dofs = [int(s) for s in args.dofs.split(",")]
    traj = run.trajectories(args.split)[0]
    out = run.sub("reports") / "interpretation.csv"
    rows = rom_mod.interpretation_export(sweep, traj, sizes, dofs, _pairs(args.windows), path=out)
    print(f"exported {len(rows)} rows for sizes {sizes} -> {out}")
    return [out]


VERBS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "train-ae": cmd_train_ae,
    "train-lstm": cmd_train_lstm,
    "rom-predict": cmd_rom_predict,
    "evaluate": cmd_evaluate,
    "export-interpretation": cmd_export_interpretation,
}


# ------------------------------------------------------------------ parsing


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, eq, value = item.partition("=")
        if not eq or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nnmrom", description="Autoencoder + LSTM reduced-order models of nonlinear MDOF systems.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("run", nargs="?" if verb == "evaluate" else None, help="run file, preset name or manifest.json")
        s.add_argument("--out", help="run directory (overrides output.dir and $" + OUTPUT_ROOT_ENV + ")")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. lstm.epochs=100")
        if verb == "sweep":
            s.add_argument("--workers", type=int, default=1, help="parallel worker processes (one per bottleneck size)")
            s.add_argument("--sizes", help="comma-separated bottleneck sizes (default ae.sizes or 1..n_dof)")
            s.add_argument("--restarts", type=int)
        if verb == "train-ae":
            s.add_argument("--bottleneck", type=int)
        if verb == "evaluate":
            s.add_argument("--predicted", help="predicted trajectory file (.csv or .traj)")
            s.add_argument("--truth", help="reference trajectory file (.csv or .traj)")
        if verb == "export-interpretation":
            s.add_argument("--sizes", help="comma-separated sizes (default every swept size)")
            s.add_argument("--dofs", default="1,10")
            s.add_argument("--windows", default="0:10,40:50", help="start:stop seconds, comma-separated")
            s.add_argument("--split", choices=("train", "test"), default="train")
    return p


def _load_config(source: str, overrides: dict) -> RunConfig:
    path = Path(source)
    if path.name.endswith("manifest.json") and path.exists():
        data = json.loads(path.read_text()).get("config")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: no 'config' entry")
        data = apply_overrides(data, overrides)
        return RunConfig(data, str(path), Path(data.get("_base_dir", path.parent)))
    return load_run_config(source, overrides)


def _resolve(args) -> RunDir | None:
    if args.run is None:
        return None
    overrides = _parse_set(args.set)
    if getattr(args, "bottleneck", None) is not None:
        overrides["ae.bottleneck"] = args.bottleneck
    if getattr(args, "restarts", None) is not None:
        overrides["ae.restarts"] = args.restarts
    if args.verb == "sweep" and args.sizes:
        overrides["ae.sizes"] = [int(s) for s in args.sizes.split(",")]
    cfg = _load_config(args.run, overrides)
    if "_base_dir" not in cfg.data:
        cfg.data = _merge(cfg.data, {"_base_dir": str(Path(cfg.base_dir).resolve())})
    if args.out:
        root = Path(args.out)
    elif Path(args.run).name.endswith("manifest.json"):
        root = Path(args.run).parent
    else:
        root = cfg.output_dir(os.environ.get(OUTPUT_ROOT_ENV))
    root.mkdir(parents=True, exist_ok=True)
    return RunDir(root, cfg)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        run = _resolve(args)
        if run is None and not (args.verb == "evaluate" and args.predicted):
            raise UsageError(f"nnmrom {args.verb}: a run file or preset is required")
        outputs = VERBS[args.verb](run, args)
        if run is not None:
            run.record(outputs)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, MissingArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ConvergenceError, TrainingError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
