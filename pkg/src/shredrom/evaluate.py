"""Reconstruction metrics, ensemble averaging and placement sweeps.

The headline metric is the test-set mean of per-snapshot relative errors
||u - u_hat|| / ||u|| computed on full reconstructed states (after the
basis map), never on coefficients.
"""

from __future__ import annotations

import concurrent.futures
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as nn
from .dataset import (
    LagDataset,
    SensorConfig,
    TEST,
    VAL,
    apply_scaler,
    assemble,
    build_windows,
    invert_scaler,
    place_sensors,
)
from .datagen import TrajectorySet
from .linalg import PODBasis, pod_reconstruct
from .train import TrainConfig, TrainHistory, train

log = logging.getLogger(__name__)


def mean_relative_error(
    truth: np.ndarray, pred: np.ndarray
) -> tuple[float, np.ndarray, int]:
    """Per-row Euclidean relative errors and their arithmetic mean.

    Zero-norm truth rows cannot be scored; they are dropped from the
    per-sample array and counted in the returned ``skipped`` field.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    norms = np.linalg.norm(truth, axis=-1)
    valid = norms > 0.0
    per_sample = np.linalg.norm(truth[valid] - pred[valid], axis=-1) / norms[valid]
    mean = float(per_sample.mean()) if per_sample.size else float("nan")
    return mean, per_sample, int(np.sum(~valid))


@dataclass
class EvalReport:
    mean_relative_error: float
    per_sample: np.ndarray
    skipped: int
    scenario: np.ndarray
    time_index: np.ndarray
    parameter_mae: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("# mean_relative_error = %.17g\n" % self.mean_relative_error)
            fh.write("# skipped = %d\n" % self.skipped)
            if self.parameter_mae is not None:
                fh.write(
                    "# parameter_mae = %s\n"
                    % ",".join("%.17g" % x for x in self.parameter_mae)
                )
            for key in sorted(self.metadata):
                fh.write(f"# {key} = {self.metadata[key]}\n")
            fh.write("scenario,time,rel_err\n")
            for s, t, e in zip(self.scenario, self.time_index, self.per_sample):
                fh.write("%d,%d,%.17g\n" % (s, t, e))

    @classmethod
    def from_csv(cls, path: str | Path) -> "EvalReport":
        mean = float("nan")
        skipped = 0
        pmae = None
        metadata: dict = {}
        rows = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                key = key.strip()
                value = value.strip()
                if key == "mean_relative_error":
                    mean = float(value)
                elif key == "skipped":
                    skipped = int(value)
                elif key == "parameter_mae":
                    pmae = np.array([float(x) for x in value.split(",")])
                else:
                    metadata[key] = value
            elif line and not line.startswith("scenario"):
                s, t, e = line.split(",")
                rows.append((int(s), int(t), float(e)))
        arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
        return cls(
            mean_relative_error=mean,
            per_sample=arr[:, 2],
            skipped=skipped,
            scenario=arr[:, 0].astype(np.int64),
            time_index=arr[:, 1].astype(np.int64),
            parameter_mae=pmae,
            metadata=metadata,
        )


def predict_outputs(
    model: nn.ShredModel, sensors: np.ndarray, batch_size: int = 1024
) -> np.ndarray:
    """Unscaled network outputs along a raw sensor trajectory (N_t, N_s).

    Row k is produced from the zero-pre-padded window ending at k, so it
    depends only on readings at times <= k.
    """
    sensors = np.asarray(sensors, dtype=np.float64)
    if sensors.ndim != 2 or sensors.shape[1] != model.n_sensors:
        raise ValueError(f"sensors must be (N_t, {model.n_sensors})")
    scaled = apply_scaler(model.input_scaler, sensors)
    windows = build_windows(scaled[None], model.lag)[0]
    out = nn.predict_scaled(model, windows, batch_size)
    return invert_scaler(model.target_scaler, out)


def reconstruct_trajectory(
    model: nn.ShredModel, basis: PODBasis, sensors: np.ndarray
) -> np.ndarray:
    """Full-state reconstruction (N_t, N_h) from a raw sensor history."""
    out = predict_outputs(model, sensors)
    return pod_reconstruct(basis, out[:, : model.n_coeffs])


def ensemble_predict(
    models: list[nn.ShredModel], sensors: np.ndarray, basis: PODBasis
) -> np.ndarray:
    """Average the members' coefficient predictions, then map to states once.

    By linearity of the basis map this equals averaging reconstructed
    states. Members must agree on lag, sensor count and coefficient count.
    """
    if not models:
        raise ValueError("need at least one model")
    first = models[0]
    for m in models[1:]:
        if (m.lag, m.n_sensors, m.n_coeffs) != (
            first.lag,
            first.n_sensors,
            first.n_coeffs,
        ):
            raise ValueError("ensemble members have heterogeneous shapes")
    coeffs = np.mean(
        [predict_outputs(m, sensors)[:, : m.n_coeffs] for m in models], axis=0
    )
    return pod_reconstruct(basis, coeffs)


def ensemble_eval(
    models: list[nn.ShredModel],
    basis: PODBasis,
    sensors_all: np.ndarray,
    traj: TrajectorySet,
    labels: np.ndarray,
    label: int = TEST,
    batch_size: int = 1024,
) -> tuple[list[float], float]:
    """Score members and their average on one shared set of sensor inputs.

    ``sensors_all`` is the raw (N_p, N_t, N_s) reading array every member
    sees at evaluation time (e.g. carrying one fresh noise draw). Returns
    (per-member mean errors, ensemble mean error) over ``label`` samples.
    """
    n_p, n_t, _ = sensors_all.shape
    rows = np.flatnonzero(labels.reshape(-1) == label)
    truth = traj.states[rows // n_t, rows % n_t]
    coeff_sum = None
    member_eps = []
    for m in models:
        scaled = apply_scaler(m.input_scaler, sensors_all)
        windows = build_windows(scaled, m.lag).reshape(n_p * n_t, m.lag, -1)[rows]
        out = invert_scaler(m.target_scaler, nn.predict_scaled(m, windows, batch_size))
        coeffs = out[:, : m.n_coeffs]
        eps, _, _ = mean_relative_error(truth, pod_reconstruct(basis, coeffs))
        member_eps.append(eps)
        coeff_sum = coeffs if coeff_sum is None else coeff_sum + coeffs
    ens_eps, _, _ = mean_relative_error(
        truth, pod_reconstruct(basis, coeff_sum / len(models))
    )
    return member_eps, ens_eps


def parameter_mae(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Mean absolute error per parameter coordinate."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    return np.mean(np.abs(truth - pred), axis=0)


def evaluate_split(
    model: nn.ShredModel,
    basis: PODBasis,
    dataset: LagDataset,
    traj: TrajectorySet,
    label: int = TEST,
    batch_size: int = 1024,
) -> EvalReport:
    """Score every sample carrying ``label`` against the true states."""
    rows = dataset.rows(label)
    if rows.size == 0:
        raise ValueError(f"no samples with split label {label}")
    out_scaled = nn.predict_scaled(model, dataset.windows[rows], batch_size)
    out = invert_scaler(dataset.target_scaler, out_scaled)
    pred_states = pod_reconstruct(basis, out[:, : dataset.n_coeffs])
    scen = dataset.meta[rows, 0]
    tidx = dataset.meta[rows, 1]
    truth = traj.states[scen, tidx]
    mean, per_sample, skipped = mean_relative_error(truth, pred_states)
    pmae = None
    if dataset.n_param_targets:
        pmae = parameter_mae(traj.params[scen], out[:, dataset.n_coeffs :])
    # per_sample drops zero-norm rows; keep meta aligned with the kept rows
    keep = np.linalg.norm(truth, axis=-1) > 0.0
    return EvalReport(
        mean_relative_error=mean,
        per_sample=per_sample,
        skipped=skipped,
        scenario=scen[keep],
        time_index=tidx[keep],
        parameter_mae=pmae,
    )


@dataclass
class PipelineResult:
    model: nn.ShredModel
    history: TrainHistory
    test_report: EvalReport
    val_eps: float
    seconds: float


def run_pipeline(
    traj: TrajectorySet,
    basis: PODBasis,
    labels: np.ndarray,
    sensor_cfg: SensorConfig,
    lag: int,
    train_cfg: TrainConfig,
    init_seed: int = 0,
    estimate_params: bool = False,
    model_kwargs: dict | None = None,
) -> PipelineResult:
    """Dataset assembly + training + test/val scoring for one configuration."""
    tic = time.perf_counter()
    data = assemble(traj, basis, sensor_cfg, lag, labels, estimate_params)
    model = nn.init_model(
        n_sensors=sensor_cfg.n_sensors,
        n_coeffs=basis.rank,
        lag=lag,
        input_scaler=data.input_scaler,
        target_scaler=data.target_scaler,
        n_param_targets=data.n_param_targets,
        dropout=train_cfg.dropout,
        seed=init_seed,
        **(model_kwargs or {}),
    )
    best, history = train(model, data, train_cfg)
    test_report = evaluate_split(best, basis, data, traj, TEST)
    val_report = evaluate_split(best, basis, data, traj, VAL)
    return PipelineResult(
        model=best,
        history=history,
        test_report=test_report,
        val_eps=val_report.mean_relative_error,
        seconds=time.perf_counter() - tic,
    )


@dataclass
class SweepCell:
    axis: str
    value: int
    placement_seed: int
    test_eps: float
    val_eps: float
    train_seconds: float
    error: str = ""


def _derived_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def sweep(
    traj: TrajectorySet,
    basis: PODBasis,
    labels: np.ndarray,
    axis: str,
    values: list[int],
    n_placements: int,
    train_cfg: TrainConfig,
    base_lag: int = 50,
    base_sensors: int = 2,
    noise_std: float = 0.0,
    seed: int = 0,
    threads: int = 1,
) -> list[SweepCell]:
    """Train one model per (axis value, random placement) and score it.

    axis = "lag" varies the window length at ``base_sensors`` fixed sensors;
    axis = "n_sensors" varies the sensor count at ``base_lag``. A failed
    cell is recorded with NaN scores instead of aborting the sweep.
    """
    if axis not in ("lag", "n_sensors"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    jobs = []
    for vi, value in enumerate(values):
        for p in range(n_placements):
            jobs.append((vi, int(value), p))

    def run_cell(job):
        vi, value, p = job
        placement_seed = _derived_seed(seed, vi, p, 0)
        init_seed = _derived_seed(seed, vi, p, 1)
        noise_seed = _derived_seed(seed, vi, p, 2)
        n_sensors = value if axis == "n_sensors" else base_sensors
        lag = value if axis == "lag" else base_lag
        cell = SweepCell(axis, value, placement_seed, np.nan, np.nan, np.nan)
        try:
            sensor_cfg = SensorConfig(
                indices=place_sensors(n_sensors, traj.n_state, placement_seed),
                noise_std=noise_std,
                noise_seed=noise_seed,
            )
            result = run_pipeline(
                traj, basis, labels, sensor_cfg, lag, train_cfg, init_seed
            )
            cell.test_eps = result.test_report.mean_relative_error
            cell.val_eps = result.val_eps
            cell.train_seconds = result.seconds
        except Exception as exc:  # record, keep sweeping
            cell.error = f"{type(exc).__name__}: {exc}"
            log.warning("sweep cell %s=%s placement %d failed: %s", axis, value, p, exc)
        return cell

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(run_cell, jobs))
    else:
        cells = [run_cell(job) for job in jobs]
    return cells


def write_sweep_csv(cells: list[SweepCell], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("axis,value,placement_seed,test_eps,val_eps,train_seconds\n")
        for c in cells:
            fh.write(
                "%s,%d,%d,%.17g,%.17g,%.17g\n"
                % (c.axis, c.value, c.placement_seed, c.test_eps, c.val_eps, c.train_seconds)
            )


def median_eps(cells: list[SweepCell], value: int) -> float:
    eps = [c.test_eps for c in cells if c.value == value and np.isfinite(c.test_eps)]
    if not eps:
        return float("nan")
    return float(np.median(eps))
