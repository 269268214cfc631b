"""Sensor-driven reduced order modeling.

Reconstructs high-dimensional parametric PDE states from short histories of
a few point sensors: trajectories are compressed onto a POD basis, and a
recurrent encoder plus shallow decoder learns the map from lag windows of
sensor readings to the basis coefficients.
"""

from .container import ContainerError, read_container, write_container
from .datagen import (
    BlowupError,
    KSConfig,
    NonObservableError,
    TrajectorySet,
    generate_trajectories,
    ks_initial,
    ks_simulate,
    ode_recover_coeffs,
    ode_solution,
    sample_parameters,
)
from .dataset import (
    LagDataset,
    Scaler,
    SensorConfig,
    add_noise,
    apply_scaler,
    assemble,
    build_lag_windows,
    extract_sensors,
    fit_scaler,
    invert_scaler,
    place_sensors,
    split,
    split_labels,
)
from .evaluate import (
    EvalReport,
    ensemble_predict,
    evaluate_split,
    mean_relative_error,
    parameter_mae,
    reconstruct_trajectory,
    run_pipeline,
    sweep,
)
from .linalg import PODBasis, pod_fit, pod_project, pod_reconstruct, randomized_svd
from .model import ShredModel, backward, forward, init_model, load_model, save_model
from .train import TrainConfig, TrainHistory, adam_step, train

__all__ = [
    "BlowupError",
    "ContainerError",
    "EvalReport",
    "KSConfig",
    "LagDataset",
    "NonObservableError",
    "PODBasis",
    "Scaler",
    "SensorConfig",
    "ShredModel",
    "TrainConfig",
    "TrainHistory",
    "TrajectorySet",
    "adam_step",
    "add_noise",
    "apply_scaler",
    "assemble",
    "backward",
    "build_lag_windows",
    "ensemble_predict",
    "evaluate_split",
    "extract_sensors",
    "fit_scaler",
    "forward",
    "generate_trajectories",
    "init_model",
    "invert_scaler",
    "ks_initial",
    "ks_simulate",
    "load_model",
    "mean_relative_error",
    "ode_recover_coeffs",
    "ode_solution",
    "parameter_mae",
    "place_sensors",
    "pod_fit",
    "pod_project",
    "pod_reconstruct",
    "randomized_svd",
    "read_container",
    "reconstruct_trajectory",
    "run_pipeline",
    "sample_parameters",
    "save_model",
    "split",
    "split_labels",
    "sweep",
    "train",
    "write_container",
]

__version__ = "0.1.0"
