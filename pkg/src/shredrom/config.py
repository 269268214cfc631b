"""Plain-text experiment configuration.

Files are INI-style sections of ``key = value`` lines. Every key is typed
and validated against the schema below; unknown sections or keys are
rejected with the offending name, as are values that fail their constraint.
Defaults reproduce the reference experiment at full scale.
"""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

from .datagen import KSConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _fraction(x):
    return 0 < x < 1


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(tok) for tok in raw.split(","))


# (parser, default, validator or None)
SCHEMA: dict[str, dict[str, tuple]] = {
    "ks": {
        "domain_length": (float, 22.0, _positive),
        "horizon": (float, 200.0, _positive),
        "dt": (float, 0.01, _positive),
        "n_grid": (int, 100, lambda v: v >= 4),
        "save_stride": (int, 100, _positive),
        "n_trajectories": (int, 500, _positive),
        "nu_min": (float, 1.0, None),
        "nu_max": (float, 2.0, None),
        "omega_min": (float, 1.0, None),
        "omega_max": (float, 5.0, None),
        "param_seed": (int, 101, None),
        "contour_points": (int, 16, _positive),
        "max_resample_attempts": (int, 5, _positive),
    },
    "pod": {
        "rank": (int, 20, _positive),
        "oversample": (int, 10, _positive),
        "power_iters": (int, 2, _nonneg),
        "seed": (int, 202, None),
    },
    "sensors": {
        "count": (int, 2, _positive),
        "placement_seed": (int, 303, None),
        "indices": (_parse_int_list, (), None),
        "noise_std": (float, 0.0, _nonneg),
        "noise_seed": (int, 404, None),
    },
    "dataset": {
        "lag": (int, 50, _positive),
        "split_mode": (str, "parameterwise", lambda v: v in ("parameterwise", "timewise")),
        "train_fraction": (float, 0.8, _fraction),
        "val_fraction": (float, 0.1, _fraction),
        "test_fraction": (float, 0.1, _fraction),
        "split_seed": (int, 505, None),
        "estimate_params": (_parse_bool, False, None),
    },
    "model": {
        "hidden_size": (int, 64, _positive),
        "sdn_hidden1": (int, 350, _positive),
        "sdn_hidden2": (int, 400, _positive),
        "init_seed": (int, 606, None),
        "forget_bias": (float, 1.0, None),
    },
    "train": {
        "epochs": (int, 200, _positive),
        "lr_phase1": (float, 1e-3, _nonneg),
        "lr_phase2": (float, 1e-4, _nonneg),
        "phase_split": (int, 100, _nonneg),
        "batch_size": (int, 64, _positive),
        "dropout": (float, 0.1, lambda v: 0 <= v < 1),
        "adam_beta1": (float, 0.9, _fraction),
        "adam_beta2": (float, 0.999, _fraction),
        "adam_eps": (float, 1e-8, _positive),
        "clip_norm": (float, 0.0, _nonneg),
        "seed": (int, 707, None),
    },
    "eval": {
        "batch_size": (int, 1024, _positive),
        "ensemble_members": (int, 20, _positive),
        "ensemble_noise_std": (float, 0.25, _nonneg),
        "ensemble_seed": (int, 808, None),
        "eval_noise_seed": (int, 909, None),
        "sweep_axis": (str, "lag", lambda v: v in ("lag", "n_sensors")),
        "sweep_values": (_parse_int_list, (1, 5, 10, 25, 50), None),
        "sweep_placements": (int, 10, _positive),
        "sweep_seed": (int, 1010, None),
    },
}

# Keys whose value seeds a random stream, in stable order; a CLI-level
# master seed replaces each with a stream derived from its position here.
SEED_KEYS: list[tuple[str, str]] = [
    (section, key)
    for section in SCHEMA
    for key in SCHEMA[section]
    if key == "seed" or key.endswith("_seed")
]


def schema_manifest() -> list[str]:
    """Every reachable tunable as ``section.key``."""
    return [f"{sec}.{key}" for sec in SCHEMA for key in SCHEMA[sec]]


class ExperimentConfig:
    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls(
            {
                sec: {key: spec[1] for key, spec in SCHEMA[sec].items()}
                for sec in SCHEMA
            }
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}")
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(
                        f"{path}: unknown key {key!r} in section [{section}]"
                    )
                parse, _, validate = SCHEMA[section][key]
                try:
                    value = parse(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"{path}: section [{section}], key {key!r}: "
                        f"cannot parse {raw!r} ({exc})"
                    )
                if validate is not None and not validate(value):
                    raise ConfigError(
                        f"{path}: section [{section}], key {key!r}: "
                        f"invalid value {raw!r}"
                    )
                cfg.values[section][key] = value
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d = self.values["dataset"]
        total = d["train_fraction"] + d["val_fraction"] + d["test_fraction"]
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(
                f"section [dataset]: split fractions sum to {total}, expected 1"
            )
        ks = self.values["ks"]
        if ks["nu_min"] >= ks["nu_max"] or ks["omega_min"] >= ks["omega_max"]:
            raise ConfigError("section [ks]: parameter ranges need min < max")
        tr = self.values["train"]
        if tr["phase_split"] > tr["epochs"]:
            raise ConfigError(
                "section [train]: phase_split must not exceed epochs"
            )
        try:
            self.ks_config()
        except ValueError as exc:
            raise ConfigError(f"section [ks]: {exc}")

    def override_seeds(self, master: int) -> None:
        """Re-derive every seed key from one master seed (CLI --seed)."""
        for idx, (section, key) in enumerate(SEED_KEYS):
            ss = np.random.SeedSequence(entropy=master, spawn_key=(idx,))
            self.values[section][key] = int(ss.generate_state(1, np.uint64)[0] >> 1)

    def ks_config(self, nu: float = 1.0, omega: float = 1.0) -> KSConfig:
        ks = self.values["ks"]
        return KSConfig(
            domain_length=ks["domain_length"],
            horizon=ks["horizon"],
            dt=ks["dt"],
            n_grid=ks["n_grid"],
            save_stride=ks["save_stride"],
            nu=nu,
            omega=omega,
            contour_points=ks["contour_points"],
        )

    def param_ranges(self) -> list[tuple[float, float]]:
        ks = self.values["ks"]
        return [(ks["nu_min"], ks["nu_max"]), (ks["omega_min"], ks["omega_max"])]

    def fractions(self) -> tuple[float, float, float]:
        d = self.values["dataset"]
        return (d["train_fraction"], d["val_fraction"], d["test_fraction"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"],
            lr_phase1=t["lr_phase1"],
            lr_phase2=t["lr_phase2"],
            phase_split=t["phase_split"],
            batch_size=t["batch_size"],
            dropout=t["dropout"],
            adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"],
            adam_eps=t["adam_eps"],
            clip_norm=t["clip_norm"],
            seed=t["seed"],
        )

    def model_kwargs(self) -> dict:
        m = self.values["model"]
        return {
            "hidden": m["hidden_size"],
            "sdn_hidden": (m["sdn_hidden1"], m["sdn_hidden2"]),
            "forget_bias": m["forget_bias"],
        }

    def dump(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                value = self.values[section][key]
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)
