"""Supervised dataset assembly from trajectory sets.

Pipeline order matters for leakage: split labels are decided first, the
min-max scalers (and the POD basis, fitted elsewhere) see train-labeled
rows only, and windows are built from already-scaled readings so the zero
pre-padding is a neutral token in scaled space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .datagen import TrajectorySet
from .linalg import PODBasis, pod_project

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class SensorConfig:
    indices: np.ndarray  # (N_s,) distinct grid indices
    noise_std: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("indices must be a nonempty 1-D array")
        if len(set(idx.tolist())) != idx.size:
            raise ValueError("sensor indices must be distinct")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        object.__setattr__(self, "indices", idx)

    @property
    def n_sensors(self) -> int:
        return self.indices.size


def place_sensors(n_sensors: int, n_grid: int, seed: int) -> np.ndarray:
    """Draw distinct sensor locations uniformly without replacement."""
    if not 1 <= n_sensors <= n_grid:
        raise ValueError(f"need 1 <= n_sensors <= {n_grid}, got {n_sensors}")
    return np.sort(_rng(seed).choice(n_grid, size=n_sensors, replace=False))


def extract_sensors(traj: TrajectorySet, cfg: SensorConfig) -> np.ndarray:
    """Gather state values at the sensor locations, shape (N_p, N_t, N_s)."""
    if np.any(cfg.indices >= traj.n_state) or np.any(cfg.indices < 0):
        raise IndexError(
            f"sensor indices out of range for N_h = {traj.n_state}: {cfg.indices}"
        )
    return traj.states[:, :, cfg.indices]


def add_noise(sensors: np.ndarray, noise_std: float, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise; noise_std = 0 returns the input unchanged."""
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std == 0.0:
        return sensors
    return sensors + noise_std * _rng(seed).standard_normal(sensors.shape)


@dataclass(frozen=True)
class Scaler:
    """Per-feature min-max map to [0, 1]; constant features map to 0."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if np.any(hi < lo):
            raise ValueError("hi must be >= lo elementwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0)


def fit_scaler(rows: np.ndarray) -> Scaler:
    """Fit feature ranges; ``rows`` must contain training samples only."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("rows must be a nonempty 2-D array")
    return Scaler(lo=rows.min(axis=0), hi=rows.max(axis=0))


def apply_scaler(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != scaler.lo.shape[0]:
        raise ValueError("feature count mismatch")
    return (x - scaler.lo) / scaler.span


def invert_scaler(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != scaler.lo.shape[0]:
        raise ValueError("feature count mismatch")
    return x * scaler.span + scaler.lo


@dataclass(frozen=True)
class LagDataset:
    windows: np.ndarray  # (n, L, N_s), scaled readings, zero pre-padded
    targets: np.ndarray  # (n, out_dim), scaled
    meta: np.ndarray  # (n, 2) int: (scenario, time index)
    split: np.ndarray  # (n,) int in {TRAIN, VAL, TEST}
    input_scaler: Scaler
    target_scaler: Scaler
    sensor_indices: np.ndarray
    n_coeffs: int  # leading target coordinates that are basis coefficients
    n_param_targets: int = 0

    def __post_init__(self):
        n = self.windows.shape[0]
        if not (n == self.targets.shape[0] == self.meta.shape[0] == self.split.shape[0]):
            raise ValueError("sample axes disagree")
        if self.n_coeffs + self.n_param_targets != self.targets.shape[1]:
            raise ValueError("target width != n_coeffs + n_param_targets")

    @property
    def n_samples(self) -> int:
        return self.windows.shape[0]

    @property
    def lag(self) -> int:
        return self.windows.shape[1]

    def rows(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.split == label)

    def save(self, path: str | Path) -> None:
        write_container(
            path,
            {
                "windows": self.windows,
                "targets": self.targets,
                "meta": self.meta.astype(np.float64),
                "split": self.split.astype(np.float64),
                "input_lo": self.input_scaler.lo,
                "input_hi": self.input_scaler.hi,
                "target_lo": self.target_scaler.lo,
                "target_hi": self.target_scaler.hi,
                "sensor_indices": self.sensor_indices.astype(np.float64),
                "info": np.array(
                    [float(self.n_coeffs), float(self.n_param_targets)]
                ),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "LagDataset":
        t = read_container(path)
        return cls(
            windows=t["windows"],
            targets=t["targets"],
            meta=t["meta"].astype(np.int64),
            split=t["split"].astype(np.int64),
            input_scaler=Scaler(t["input_lo"], t["input_hi"]),
            target_scaler=Scaler(t["target_lo"], t["target_hi"]),
            sensor_indices=t["sensor_indices"].astype(np.int64),
            n_coeffs=int(t["info"][0]),
            n_param_targets=int(t["info"][1]),
        )


def build_windows(scaled_sensors: np.ndarray, lag: int) -> np.ndarray:
    """Lag windows over already-scaled readings, shape (N_p, N_t, L, N_s).

    The window at (i, k) holds the ``lag`` most recent readings ending at k;
    positions before the first time step are zero vectors, so every (i, k)
    yields a sample and there is no burn-in.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    n_p, n_t, n_s = scaled_sensors.shape
    padded = np.concatenate(
        [np.zeros((n_p, lag - 1, n_s)), scaled_sensors], axis=1
    )
    windows = np.empty((n_p, n_t, lag, n_s))
    for k in range(n_t):
        windows[:, k] = padded[:, k : k + lag]
    return windows


def build_lag_windows(
    scaled_sensors: np.ndarray, targets_per_timestep: np.ndarray, lag: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten per-(i, k) windows and targets in (i, k) order.

    Returns (windows [n, L, N_s], targets [n, out], meta [n, 2]) with
    n = N_p * N_t.
    """
    n_p, n_t, _ = scaled_sensors.shape
    if targets_per_timestep.shape[:2] != (n_p, n_t):
        raise ValueError("targets must align with sensors on (N_p, N_t)")
    windows = build_windows(scaled_sensors, lag).reshape(n_p * n_t, lag, -1)
    targets = targets_per_timestep.reshape(n_p * n_t, -1)
    meta = np.stack(
        np.meshgrid(np.arange(n_p), np.arange(n_t), indexing="ij"), axis=-1
    ).reshape(n_p * n_t, 2)
    return windows, targets, meta


def _partition(n: int, fractions: tuple[float, float, float], seed: int):
    """Random index partition. Val/test sizes are floored, train takes the
    remainder (201 at 80/10/10 gives 161/20/20)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"split of {n} into {fractions} leaves an empty part "
            f"({n_train}/{n_val}/{n_test})"
        )
    perm = _rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm[:n_train]] = TRAIN
    labels[perm[n_train : n_train + n_val]] = VAL
    labels[perm[n_train + n_val :]] = TEST
    return labels


def split_labels(
    n_scenarios: int,
    n_times: int,
    mode: str,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> np.ndarray:
    """Label every (scenario, time) cell, shape (N_p, N_t).

    parameterwise partitions scenarios; timewise partitions time indices
    with one shared permutation across scenarios.
    """
    if mode == "parameterwise":
        per_scenario = _partition(n_scenarios, fractions, seed)
        return np.repeat(per_scenario[:, None], n_times, axis=1)
    if mode == "timewise":
        per_time = _partition(n_times, fractions, seed)
        return np.repeat(per_time[None, :], n_scenarios, axis=0)
    raise ValueError(f"unknown split mode {mode!r}")


def split(
    dataset: LagDataset,
    mode: str,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> LagDataset:
    """Relabel an existing dataset by scenario or time partition."""
    n_p = int(dataset.meta[:, 0].max()) + 1
    n_t = int(dataset.meta[:, 1].max()) + 1
    labels = split_labels(n_p, n_t, mode, fractions, seed)
    new = labels[dataset.meta[:, 0], dataset.meta[:, 1]]
    return LagDataset(
        windows=dataset.windows,
        targets=dataset.targets,
        meta=dataset.meta,
        split=new,
        input_scaler=dataset.input_scaler,
        target_scaler=dataset.target_scaler,
        sensor_indices=dataset.sensor_indices,
        n_coeffs=dataset.n_coeffs,
        n_param_targets=dataset.n_param_targets,
    )


def assemble(
    traj: TrajectorySet,
    basis: PODBasis,
    sensor_cfg: SensorConfig,
    lag: int,
    labels: np.ndarray,
    estimate_params: bool = False,
) -> LagDataset:
    """Assemble the supervised dataset for a trajectory set.

    ``labels`` is the (N_p, N_t) split map; scalers are fitted on
    train-labeled cells only. Targets are scaled basis coefficients, with
    scaled scenario parameters appended when ``estimate_params`` is set.
    """
    if labels.shape != (traj.n_scenarios, traj.n_times):
        raise ValueError("labels shape must be (N_p, N_t)")
    sensors = extract_sensors(traj, sensor_cfg)
    sensors = add_noise(sensors, sensor_cfg.noise_std, sensor_cfg.noise_seed)

    coeffs = pod_project(basis, traj.states)  # (N_p, N_t, r)
    targets = coeffs
    n_param_targets = 0
    if estimate_params:
        n_param_targets = traj.params.shape[1]
        tiled = np.repeat(traj.params[:, None, :], traj.n_times, axis=1)
        targets = np.concatenate([coeffs, tiled], axis=-1)

    train_mask = labels == TRAIN
    input_scaler = fit_scaler(sensors[train_mask])
    target_scaler = fit_scaler(targets[train_mask])
    windows, flat_targets, meta = build_lag_windows(
        apply_scaler(input_scaler, sensors),
        apply_scaler(target_scaler, targets),
        lag,
    )
    return LagDataset(
        windows=windows,
        targets=flat_targets,
        meta=meta,
        split=labels.reshape(-1),
        input_scaler=input_scaler,
        target_scaler=target_scaler,
        sensor_indices=sensor_cfg.indices,
        n_coeffs=basis.rank,
        n_param_targets=n_param_targets,
    )
