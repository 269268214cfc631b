"""Experiment pipeline CLI.

Each subcommand is a pure function of its input artifacts, the config and
the seeds, reading and writing canonically named files under --out:

    generate -> trajectories.srd1
    pod      -> basis.srd1            (stores the split labels it fit on)
    dataset  -> dataset.srd1          (aborts if its split disagrees: leakage)
    train    -> model.srd1, history.csv
    eval     -> eval.csv              (prints mean relative test error)
    ensemble -> ensemble.csv
    sweep    -> sweep.csv

SHREDROM_THREADS caps the sweep worker pool. --seed re-derives every seed
key in the config from one master value.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import model as nn
from .config import ConfigError, ExperimentConfig
from .container import read_container, write_container
from .datagen import TrajectorySet, generate_trajectories
from .dataset import (
    LagDataset,
    SensorConfig,
    TEST,
    add_noise,
    assemble,
    extract_sensors,
    place_sensors,
    split_labels,
)
from .linalg import PODBasis, pod_fit
from .train import train

log = logging.getLogger(__name__)

TRAJ_FILE = "trajectories.srd1"
BASIS_FILE = "basis.srd1"
DATASET_FILE = "dataset.srd1"
MODEL_FILE = "model.srd1"
HISTORY_FILE = "history.csv"
EVAL_FILE = "eval.csv"
ENSEMBLE_FILE = "ensemble.csv"
SWEEP_FILE = "sweep.csv"


class StageError(RuntimeError):
    pass


def _threads() -> int:
    raw = os.environ.get("SHREDROM_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise StageError(f"SHREDROM_THREADS is not an integer: {raw!r}")
    return os.cpu_count() or 1


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path.name}; run the {producer} stage first")
    return path


def _labels_from_config(cfg: ExperimentConfig, n_p: int, n_t: int) -> np.ndarray:
    d = cfg["dataset"]
    return split_labels(n_p, n_t, d["split_mode"], cfg.fractions(), d["split_seed"])


def _sensor_config(cfg: ExperimentConfig, n_grid: int) -> SensorConfig:
    s = cfg["sensors"]
    if s["indices"]:
        indices = np.array(s["indices"], dtype=np.int64)
    else:
        indices = place_sensors(s["count"], n_grid, s["placement_seed"])
    return SensorConfig(
        indices=indices, noise_std=s["noise_std"], noise_seed=s["noise_seed"]
    )


def cmd_generate(cfg: ExperimentConfig, out: Path) -> None:
    ks = cfg["ks"]
    traj = generate_trajectories(
        cfg.ks_config(),
        cfg.param_ranges(),
        ks["n_trajectories"],
        ks["param_seed"],
        ks["max_resample_attempts"],
    )
    traj.save(out / TRAJ_FILE)
    print(
        f"wrote {TRAJ_FILE}: states {list(traj.states.shape)}, "
        f"params {list(traj.params.shape)}"
    )


def cmd_pod(cfg: ExperimentConfig, out: Path) -> None:
    traj = TrajectorySet.load(_require(out / TRAJ_FILE, "generate"))
    labels = _labels_from_config(cfg, traj.n_scenarios, traj.n_times)
    train_snaps = traj.states[labels == 0]
    p = cfg["pod"]
    basis = pod_fit(
        train_snaps.T,
        p["rank"],
        seed=p["seed"],
        oversample=p["oversample"],
        power_iters=p["power_iters"],
    )
    write_container(
        out / BASIS_FILE,
        {
            "modes": basis.modes,
            "singular_values": basis.singular_values,
            "split_labels": labels.astype(np.float64),
        },
    )
    print(
        f"wrote {BASIS_FILE}: modes {list(basis.modes.shape)}, "
        f"sigma[0]={basis.singular_values[0]:.6g}"
    )


def _load_basis(out: Path) -> tuple[PODBasis, np.ndarray]:
    t = read_container(_require(out / BASIS_FILE, "pod"))
    return PODBasis(t["modes"], t["singular_values"]), t["split_labels"].astype(
        np.int64
    )


def _checked_labels(cfg: ExperimentConfig, out: Path, traj: TrajectorySet):
    basis, fitted_labels = _load_basis(out)
    labels = _labels_from_config(cfg, traj.n_scenarios, traj.n_times)
    if fitted_labels.shape != labels.shape or np.any(fitted_labels != labels):
        raise StageError(
            "split leakage: the basis was fitted on a different train split "
            "than the configured one; refit with `pod` or fix [dataset]"
        )
    return basis, labels


def cmd_dataset(cfg: ExperimentConfig, out: Path) -> None:
    traj = TrajectorySet.load(_require(out / TRAJ_FILE, "generate"))
    basis, labels = _checked_labels(cfg, out, traj)
    data = assemble(
        traj,
        basis,
        _sensor_config(cfg, traj.n_state),
        cfg["dataset"]["lag"],
        labels,
        cfg["dataset"]["estimate_params"],
    )
    data.save(out / DATASET_FILE)
    print(
        f"wrote {DATASET_FILE}: {data.n_samples} samples, lag {data.lag}, "
        f"targets {data.targets.shape[1]}"
    )


def cmd_train(cfg: ExperimentConfig, out: Path) -> None:
    data = LagDataset.load(_require(out / DATASET_FILE, "dataset"))
    tcfg = cfg.train_config()
    model = nn.init_model(
        n_sensors=data.sensor_indices.size,
        n_coeffs=data.n_coeffs,
        lag=data.lag,
        input_scaler=data.input_scaler,
        target_scaler=data.target_scaler,
        n_param_targets=data.n_param_targets,
        dropout=tcfg.dropout,
        seed=cfg["model"]["init_seed"],
        **cfg.model_kwargs(),
    )
    best, history = train(model, data, tcfg)
    nn.save_model(best, out / MODEL_FILE, {"init_seed": cfg["model"]["init_seed"]})
    history.to_csv(out / HISTORY_FILE)
    print(
        f"wrote {MODEL_FILE}: best epoch {history.best_epoch()}, "
        f"val loss {min(history.val_loss):.6g}"
    )


def cmd_eval(cfg: ExperimentConfig, out: Path) -> None:
    traj = TrajectorySet.load(_require(out / TRAJ_FILE, "generate"))
    basis, _ = _checked_labels(cfg, out, traj)
    data = LagDataset.load(_require(out / DATASET_FILE, "dataset"))
    model, _ = nn.load_model(_require(out / MODEL_FILE, "train"))
    report = ev.evaluate_split(
        model, basis, data, traj, TEST, cfg["eval"]["batch_size"]
    )
    report.metadata["lag"] = data.lag
    report.metadata["n_sensors"] = data.sensor_indices.size
    report.to_csv(out / EVAL_FILE)
    if report.parameter_mae is not None:
        print(
            "parameter mae: "
            + ", ".join("%.6g" % x for x in report.parameter_mae)
        )
    print(f"test mean relative error: {report.mean_relative_error:.17g}")


def cmd_ensemble(cfg: ExperimentConfig, out: Path) -> None:
    traj = TrajectorySet.load(_require(out / TRAJ_FILE, "generate"))
    basis, labels = _checked_labels(cfg, out, traj)
    e = cfg["eval"]
    sensor_cfg = _sensor_config(cfg, traj.n_state)
    tcfg = cfg.train_config()
    members = []
    for member in range(e["ensemble_members"]):
        noise_seed = ev._derived_seed(e["ensemble_seed"], member, 0)
        init_seed = ev._derived_seed(e["ensemble_seed"], member, 1)
        member_sensors = SensorConfig(
            indices=sensor_cfg.indices,
            noise_std=e["ensemble_noise_std"],
            noise_seed=noise_seed,
        )
        data = assemble(
            traj, basis, member_sensors, cfg["dataset"]["lag"], labels
        )
        model = nn.init_model(
            n_sensors=member_sensors.n_sensors,
            n_coeffs=basis.rank,
            lag=data.lag,
            input_scaler=data.input_scaler,
            target_scaler=data.target_scaler,
            dropout=tcfg.dropout,
            seed=init_seed,
            **cfg.model_kwargs(),
        )
        best, _ = train(model, data, tcfg)
        members.append(best)
        log.info("trained ensemble member %d/%d", member + 1, e["ensemble_members"])

    # one shared fresh noise draw on the evaluation inputs
    raw = extract_sensors(traj, sensor_cfg)
    noisy = add_noise(raw, e["ensemble_noise_std"], e["eval_noise_seed"])
    member_eps, ens_eps = ev.ensemble_eval(
        members, basis, noisy, traj, labels, TEST, e["batch_size"]
    )
    with open(out / ENSEMBLE_FILE, "w") as fh:
        fh.write("member,test_eps\n")
        for i, eps in enumerate(member_eps):
            fh.write("%d,%.17g\n" % (i, eps))
        fh.write("ensemble,%.17g\n" % ens_eps)
    print(f"mean member error: {np.mean(member_eps):.17g}")
    print(f"ensemble test mean relative error: {ens_eps:.17g}")


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> None:
    traj = TrajectorySet.load(_require(out / TRAJ_FILE, "generate"))
    basis, labels = _checked_labels(cfg, out, traj)
    e = cfg["eval"]
    cells = ev.sweep(
        traj,
        basis,
        labels,
        e["sweep_axis"],
        list(e["sweep_values"]),
        e["sweep_placements"],
        cfg.train_config(),
        base_lag=cfg["dataset"]["lag"],
        base_sensors=cfg["sensors"]["count"],
        noise_std=cfg["sensors"]["noise_std"],
        seed=e["sweep_seed"],
        threads=_threads(),
    )
    ev.write_sweep_csv(cells, out / SWEEP_FILE)
    for value in e["sweep_values"]:
        print(
            f"{e['sweep_axis']}={value}: median test eps "
            f"{ev.median_eps(cells, value):.6g}"
        )


COMMANDS = {
    "generate": cmd_generate,
    "pod": cmd_pod,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shredrom",
        description="sensor-history to full-state reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="config file")
        p.add_argument(
            "--out", type=Path, default=Path("runs/default"), help="artifact directory"
        )
        p.add_argument(
            "--seed",
            type=int,
            default=None,
            help="master seed overriding every configured seed",
        )
        p.add_argument("--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = (
            ExperimentConfig.load(args.config)
            if args.config is not None
            else ExperimentConfig.defaults()
        )
        if args.seed is not None:
            cfg.override_seeds(args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except (ConfigError, StageError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
