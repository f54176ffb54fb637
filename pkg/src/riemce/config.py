"""Run configuration: a flat key-value document with per-dataset defaults.

Defaults for adult and gmc follow the reference training recipes
(classifier H=24, lr 1e-5, L2 0.05, 20 epochs, batch 1024; VAE d=5 with
512/256 hidden layers, beta 1e-4, 100 warm-up epochs; RBF stage with 200
resp. 350 centers, 0.01 bandwidth, 300 epochs, lr 1e-3 resp. 1e-2).  The
surface defaults are sized for the synthetic demonstration.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError

DATASETS = ("surface", "adult", "gmc")


@dataclass
class RunConfig:
    dataset: str = "surface"
    raw_path: str | None = None
    out_dir: str = "runs/surface"
    seed: int = 0
    parallelism: int = 1
    # classifier
    clf_rep_dim: int = 24
    clf_lr: float = 1e-5
    clf_l2: float = 0.05
    clf_epochs: int = 20
    clf_batch: int = 1024
    # vae warm-up
    vae_latent_dim: int = 5
    vae_hidden: tuple[int, ...] = (512, 256)
    vae_beta: float = 1e-4
    vae_epochs: int = 100
    vae_lr: float = 1e-3
    vae_batch: int = 512
    # decoder variance stage
    rbf_centers: int = 200
    rbf_bandwidth: float = 0.01
    rbf_bandwidth_mode: str = "absolute"
    rbf_epochs: int = 300
    rbf_lr: float = 1e-3
    rbf_batch: int = 512
    rbf_floor: float = 1e-6
    # synthetic surface generation
    surface_samples: int = 10000
    surface_noise: float = 0.1
    surface_hole_radius: float = 1.0
    surface_boundary_coefficient: float = 2.5
    # counterfactual grid
    ce_optimizers: tuple[str, ...] = ("sgd", "rsgd", "rsgd_c")
    ce_iterations: tuple[int, ...] = (50, 100, 150)
    ce_alphas: tuple[float, ...] = (0.0, 0.1)
    ce_eta: float = 0.1
    ce_normalize_gradient: bool = True
    ce_thresholds: tuple[float, ...] = (
        0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95,
    )
    ce_max_factuals: int | None = None  # cap for smoke runs; None = all
    # outputs
    figures: bool = True
    fig_max_trajectories: int = 500
    metric_map_resolution: int = 50

    def validate(self) -> "RunConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset in ("adult", "gmc") and not self.raw_path:
            raise ConfigError(f"dataset {self.dataset!r} needs raw_path")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        for opt in self.ce_optimizers:
            if opt not in ("sgd", "rsgd", "rsgd_c"):
                raise ConfigError(f"unknown optimizer {opt!r}")
        return self


_DATASET_DEFAULTS: dict[str, dict] = {
    "adult": {},
    "gmc": {"rbf_centers": 350, "rbf_lr": 1e-2},
    "surface": {
        "clf_rep_dim": 32,
        "clf_lr": 1e-3,
        "clf_l2": 1e-4,
        "clf_epochs": 40,
        "clf_batch": 256,
        "vae_latent_dim": 2,
        "vae_hidden": (64, 64),
        "vae_epochs": 150,
        "vae_batch": 256,
        "rbf_centers": 100,
        "rbf_bandwidth": 1.0,
        "rbf_bandwidth_mode": "scaled",
        "rbf_lr": 1e-2,
        "rbf_batch": 256,
        "surface_samples": 8000,
        "ce_max_factuals": 50,
        "out_dir": "runs/surface",
    },
}

_TUPLE_FIELDS = {"vae_hidden", "ce_optimizers", "ce_iterations", "ce_alphas", "ce_thresholds"}


def default_config(dataset: str) -> RunConfig:
    if dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {dataset!r}")
    overrides = dict(_DATASET_DEFAULTS[dataset])
    overrides.setdefault("out_dir", f"runs/{dataset}")
    return replace(RunConfig(dataset=dataset), **overrides)


def config_from_mapping(mapping: dict, validate: bool = True) -> RunConfig:
    """Build a config from a flat mapping; unknown keys are rejected."""
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base = default_config(mapping.get("dataset", "surface"))
    values = {}
    for key, value in mapping.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"config key {key!r} must be a list")
            value = tuple(value)
        values[key] = value
    cfg = replace(base, **values)
    return cfg.validate() if validate else cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat key-value mapping")
    return config_from_mapping(raw)


def save_config(config: RunConfig, path) -> None:
    """Serialize the effective config; reloading gives an identical plan."""
    data = asdict(config)
    for key in _TUPLE_FIELDS:
        data[key] = list(data[key])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=True, default_flow_style=False)
