"""Shared orchestration between the CLI commands and the test suites:
dataset preparation, model training configs, factual selection, the
counterfactual grid, and the latent cost-map computation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import data as data_mod
from . import models
from .config import RunConfig
from .counterfactual import CeConfig, CeTrajectory, generate_batch
from .errors import ConfigError
from .evaluation import realism_distances
from .geometry import enhanced_metric, metric_volume, pullback_metric
from .models import ClassifierModel, VaeModel, classify, decode_mean, encode
from .nn import derive_seed


def classifier_config(cfg: RunConfig) -> models.ClassifierConfig:
    return models.ClassifierConfig(
        rep_dim=cfg.clf_rep_dim,
        lr=cfg.clf_lr,
        l2=cfg.clf_l2,
        epochs=cfg.clf_epochs,
        batch_size=cfg.clf_batch,
        seed=derive_seed(cfg.seed, "classifier"),
    )


def vae_config(cfg: RunConfig) -> models.VaeConfig:
    return models.VaeConfig(
        latent_dim=cfg.vae_latent_dim,
        hidden_dims=tuple(cfg.vae_hidden),
        beta=cfg.vae_beta,
        epochs=cfg.vae_epochs,
        lr=cfg.vae_lr,
        batch_size=cfg.vae_batch,
        seed=derive_seed(cfg.seed, "vae"),
    )


def rbf_config(cfg: RunConfig) -> models.RbfConfig:
    return models.RbfConfig(
        centers=cfg.rbf_centers,
        bandwidth=cfg.rbf_bandwidth,
        bandwidth_mode=cfg.rbf_bandwidth_mode,
        epochs=cfg.rbf_epochs,
        lr=cfg.rbf_lr,
        batch_size=cfg.rbf_batch,
        floor=cfg.rbf_floor,
        seed=derive_seed(cfg.seed, "rbf"),
    )


def build_dataset(cfg: RunConfig) -> tuple[data_mod.TabularDataset, data_mod.TabularDataset]:
    """Materialize the configured dataset as a normalized train/test pair."""
    if cfg.dataset == "surface":
        raw = data_mod.generate_surface(
            data_mod.SyntheticSurfaceSpec(
                samples=cfg.surface_samples,
                noise=cfg.surface_noise,
                hole_radius=cfg.surface_hole_radius,
                boundary_coefficient=cfg.surface_boundary_coefficient,
                seed=derive_seed(cfg.seed, "surface"),
            )
        )
    elif cfg.dataset == "adult":
        if not cfg.raw_path:
            raise ConfigError("adult dataset needs raw_path")
        raw = data_mod.load_adult(cfg.raw_path)
    elif cfg.dataset == "gmc":
        if not cfg.raw_path:
            raise ConfigError("gmc dataset needs raw_path")
        raw = data_mod.load_gmc(cfg.raw_path)
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    return data_mod.split(raw, derive_seed(cfg.seed, "split"))


def select_factuals(
    clf: ClassifierModel,
    test: data_mod.TabularDataset,
    target: int = 1,
    cap: int | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Correctly-classified members of the non-target class, in test order.

    Returns (factual rows, their test indices, count of non-target rows).
    """
    non_target = test.y != target
    proba = classify(clf, test.x)
    correct = (proba < 0.5) if target == 1 else (proba >= 0.5)
    chosen = np.nonzero(non_target & correct)[0]
    if cap is not None:
        chosen = chosen[:cap]
    return test.x[chosen], chosen, int(non_target.sum())


def ce_config(cfg: RunConfig, optimizer: str, iterations: int, alpha: float) -> CeConfig:
    return CeConfig(
        optimizer=optimizer,
        eta=cfg.ce_eta,
        iterations=iterations,
        alpha=alpha,
        target=1,
        thresholds=tuple(cfg.ce_thresholds),
        normalize_gradient=cfg.ce_normalize_gradient,
        seed=cfg.seed,
    )


def cell_name(optimizer: str, iterations: int, alpha: float) -> str:
    return f"traj_{optimizer}_it{iterations}_alpha{alpha:g}"


def run_cell(
    vae: VaeModel,
    clf: ClassifierModel,
    factuals: np.ndarray,
    cfg: RunConfig,
    optimizer: str,
    iterations: int,
    alpha: float,
) -> list[CeTrajectory]:
    return generate_batch(
        vae,
        clf,
        factuals,
        ce_config(cfg, optimizer, iterations, alpha),
        parallelism=cfg.parallelism,
    )


def latent_bbox(codes: np.ndarray, margin: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    lo = codes.min(axis=0)
    hi = codes.max(axis=0)
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


def metric_map_grid(
    vae: VaeModel,
    clf: ClassifierModel | None,
    train_codes: np.ndarray,
    resolution: int = 50,
    metric_kind: str = "pullback",
    margin: float = 0.15,
) -> dict:
    """Volume-measure map over a 2-D latent grid spanning the codes.

    Returns grid axes, the flattened (row-major over z2, z1) sqrt-det
    values, and the decoded ambient point of every grid node.
    """
    if vae.latent_dim != 2:
        raise ConfigError("metric map is defined for 2-D latent spaces only")
    if metric_kind not in ("pullback", "enhanced"):
        raise ConfigError(f"unknown metric kind {metric_kind!r}")
    if metric_kind == "enhanced" and clf is None:
        raise ConfigError("enhanced metric map needs a classifier")
    lo, hi = latent_bbox(train_codes, margin)
    z1 = np.linspace(lo[0], hi[0], resolution)
    z2 = np.linspace(lo[1], hi[1], resolution)
    values = np.empty(resolution * resolution)
    decoded = np.empty((resolution * resolution, vae.ambient_dim))
    k = 0
    for b in z2:
        for a in z1:
            z = np.array([a, b])
            metric = (
                pullback_metric(vae, z)
                if metric_kind == "pullback"
                else enhanced_metric(vae, clf, z)
            )
            values[k] = metric_volume(metric)
            decoded[k] = decode_mean(vae, z)
            k += 1
    return {"z1": z1, "z2": z2, "sqrt_det": values, "decoded": decoded}


def surface_hole_mask(
    decoded: np.ndarray,
    features: list[data_mod.FeatureSpec],
    hole_center: tuple[float, float],
    hole_radius: float,
) -> np.ndarray:
    """Grid nodes whose decoded plane coordinates fall inside the hole."""
    mins = np.array([features[0].norm_min, features[1].norm_min])
    maxs = np.array([features[0].norm_max, features[1].norm_max])
    plane = decoded[:, :2] * (maxs - mins) + mins
    return ((plane - np.asarray(hole_center)) ** 2).sum(axis=1) < hole_radius**2


def volume_at_codes(
    vae: VaeModel,
    clf: ClassifierModel | None,
    codes: np.ndarray,
    metric_kind: str = "pullback",
    cap: int = 4000,
) -> np.ndarray:
    """Volume measure at (a deterministic prefix of) the given codes."""
    codes = codes[:cap]
    out = np.empty(codes.shape[0])
    for i, z in enumerate(codes):
        metric = (
            pullback_metric(vae, z)
            if metric_kind == "pullback"
            else enhanced_metric(vae, clf, z)
        )
        out[i] = metric_volume(metric)
    return out


def in_cloud_fraction(
    trajectories: list[CeTrajectory], train_matrix: np.ndarray, radius: float = 0.15
) -> float:
    """Fraction of decoded trajectory points within `radius` of the cloud."""
    points = np.concatenate(
        [np.stack([s.x_hat for s in t.steps]) for t in trajectories if t.steps]
    )
    return float((realism_distances(points, train_matrix) <= radius).mean())


def mean_ld_per_step(
    trajectories: list[CeTrajectory], train_matrix: np.ndarray, cap: int = 500
) -> np.ndarray:
    """Mean nearest-training distance at each step index (first `cap` trajectories)."""
    used = [t for t in trajectories if t.steps][:cap]
    if not used:
        return np.empty(0)
    n_steps = min(len(t.steps) for t in used)
    stacked = np.stack([[s.x_hat for s in t.steps[:n_steps]] for t in used])
    flat = stacked.reshape(-1, stacked.shape[-1])
    dists = realism_distances(flat, train_matrix).reshape(len(used), n_steps)
    return dists.mean(axis=0)


def train_codes(vae: VaeModel, dataset: data_mod.TabularDataset) -> np.ndarray:
    return encode(vae, dataset.x)


def write_history_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for row in rows:
        for key in row:
            if key not in keys:
                keys.append(key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(k)) for k in keys) + "\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.8g}"
    return str(value)
