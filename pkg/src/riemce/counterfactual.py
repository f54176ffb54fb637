"""Latent-space counterfactual optimizers and trajectory plumbing.

All three optimizers minimize the same loss (target-class BCE plus an
optional Euclidean fidelity term) by normalized descent steps in latent
space; they differ only in the preconditioner: none for plain SGD, the
decoder pull-back metric for RSGD, and the classifier-enhanced metric
for RSGD-C.  Trajectories are fully recorded; confidence thresholds are
extracted post hoc rather than used for early stopping.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .errors import ConfigError, NumericError, RiemceError, SingularMetricError
from .geometry import enhanced_metric, pullback_metric, riemannian_gradient
from .models import ClassifierModel, VaeModel, decode_mean, encode

OPTIMIZERS = ("sgd", "rsgd", "rsgd_c")


@dataclass
class CeConfig:
    optimizer: str = "sgd"
    eta: float = 0.1
    iterations: int = 100
    alpha: float = 0.0
    target: int = 1
    thresholds: tuple[float, ...] = ()
    normalize_gradient: bool = True  # applied uniformly to all optimizers
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eta <= 0:
            raise ConfigError("step size eta must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.alpha < 0:
            raise ConfigError("fidelity weight alpha must be >= 0")
        if self.target not in (0, 1):
            raise ConfigError("target label must be 0 or 1")


@dataclass
class CeStep:
    z: np.ndarray
    x_hat: np.ndarray
    confidence: float  # oriented toward the target label
    loss: float
    grad_norm: float
    jitter: float


@dataclass
class CeTrajectory:
    factual: np.ndarray
    target: int
    optimizer: str
    alpha: float
    eta: float
    steps: list[CeStep] = field(default_factory=list)
    valid: bool = True
    error: str | None = None
    stalled: bool = False
    first_hits: dict[float, int] = field(default_factory=dict)

    @property
    def x_ce(self) -> np.ndarray:
        return self.steps[-1].x_hat

    @property
    def confidences(self) -> np.ndarray:
        return np.array([s.confidence for s in self.steps])


def ce_loss(
    vae: VaeModel,
    clf: ClassifierModel,
    z,
    x_factual,
    target: int,
    alpha: float,
) -> tuple[float, np.ndarray]:
    """Loss and exact latent gradient at z.

    BCE toward the target class at the decoded mean, plus alpha times the
    non-squared Euclidean distance to the factual (zero subgradient at
    the cusp).
    """
    ev = _eval_point(vae, clf, np.asarray(z, float), np.asarray(x_factual, float),
                     target, alpha)
    return ev["loss"], ev["grad"]


def _eval_point(vae, clf, z, x_factual, target, alpha):
    x_hat = decode_mean(vae, z)
    jac_dec = nn.jacobian(vae.decoder_mean_net, z)
    rep = nn.forward(clf.representation_net, x_hat, mode="infer")
    logit = float(rep @ clf.head_weight + clf.head_bias)
    prob = float(nn.sigmoid(logit))
    loss = float(nn.softplus(logit)) - target * logit
    grad_x = (prob - target) * (
        nn.jacobian(clf.representation_net, x_hat).T @ clf.head_weight
    )
    if alpha > 0:
        diff = x_hat - x_factual
        dist = float(np.linalg.norm(diff))
        loss += alpha * dist
        if dist > 0:
            grad_x = grad_x + alpha * diff / dist
    grad = jac_dec.T @ grad_x
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericError(f"non-finite loss or gradient at z={z.tolist()}")
    confidence = prob if target == 1 else 1.0 - prob
    return {
        "x_hat": x_hat,
        "loss": loss,
        "grad": grad,
        "confidence": confidence,
    }


def generate_ce(
    vae: VaeModel,
    clf: ClassifierModel,
    x_factual,
    config: CeConfig,
    metric_fn=None,
) -> CeTrajectory:
    """Run one counterfactual trajectory from the encoded factual.

    The latent start is the encoder posterior mean.  A fixed number of
    iterations is taken with no early stopping; every update direction is
    scaled to length eta when gradient normalization is on.  On numeric
    or singular-metric failure the partial trajectory is returned with
    ``valid=False``.  ``metric_fn`` overrides the optimizer's metric (a
    testing hook, e.g. a forced identity metric).
    """
    x_factual = np.asarray(x_factual, dtype=np.float64)
    traj = CeTrajectory(
        factual=x_factual,
        target=config.target,
        optimizer=config.optimizer,
        alpha=config.alpha,
        eta=config.eta,
    )
    z = encode(vae, x_factual)
    try:
        ev = _eval_point(vae, clf, z, x_factual, config.target, config.alpha)
        for t in range(config.iterations + 1):
            step = CeStep(
                z=z.copy(),
                x_hat=ev["x_hat"],
                confidence=ev["confidence"],
                loss=ev["loss"],
                grad_norm=float(np.linalg.norm(ev["grad"])),
                jitter=0.0,
            )
            traj.steps.append(step)
            if t == config.iterations:
                break
            if config.optimizer == "sgd":
                direction = ev["grad"]
            else:
                if metric_fn is not None:
                    metric = metric_fn(z)
                elif config.optimizer == "rsgd":
                    metric = pullback_metric(vae, z)
                else:
                    metric = enhanced_metric(vae, clf, z)
                step.jitter = metric.jitter
                direction = riemannian_gradient(metric, ev["grad"])
            if config.normalize_gradient:
                norm = float(np.linalg.norm(direction))
                if norm == 0.0:
                    traj.stalled = True
                else:
                    z = z - (config.eta / norm) * direction
            else:
                z = z - config.eta * direction
            ev = _eval_point(vae, clf, z, x_factual, config.target, config.alpha)
    except (NumericError, SingularMetricError) as exc:
        traj.valid = False
        traj.error = str(exc)
    traj.first_hits = {
        tau: hit[1]
        for tau in config.thresholds
        if (hit := extract_at_threshold(traj, tau)) is not None
    }
    return traj


def extract_at_threshold(traj: CeTrajectory, tau: float):
    """First post-update step whose confidence reaches tau, or None.

    The initial point (step 0) never counts: a counterfactual involves at
    least one update.
    """
    for idx in range(1, len(traj.steps)):
        if traj.steps[idx].confidence >= tau:
            return traj.steps[idx].x_hat, idx
    return None


def _strip_caches(vae: VaeModel, clf: ClassifierModel) -> None:
    for net in (
        vae.encoder_trunk,
        vae.encoder_mean_head,
        vae.encoder_var_head,
        vae.decoder_mean_net,
        clf.representation_net,
    ):
        if net is not None:
            net._cache = None


def _safe_one(vae, clf, x_factual, config) -> CeTrajectory:
    try:
        return generate_ce(vae, clf, x_factual, config)
    except RiemceError as exc:
        return CeTrajectory(
            factual=np.asarray(x_factual, dtype=np.float64),
            target=config.target,
            optimizer=config.optimizer,
            alpha=config.alpha,
            eta=config.eta,
            valid=False,
            error=str(exc),
        )


_WORKER: dict = {}


def _init_worker(vae, clf, factuals, config):
    # single-threaded BLAS inside workers keeps results bit-identical to
    # the serial path regardless of parallelism degree
    _WORKER["limits"] = threadpool_limits(limits=1)
    _WORKER["args"] = (vae, clf, factuals, config)


def _worker_one(index: int) -> CeTrajectory:
    vae, clf, factuals, config = _WORKER["args"]
    return _safe_one(vae, clf, factuals[index], config)


def generate_batch(
    vae: VaeModel,
    clf: ClassifierModel,
    factuals,
    config: CeConfig,
    parallelism: int = 1,
) -> list[CeTrajectory]:
    """Order-preserving batch run; per-sample errors become flagged
    trajectories and never abort the batch.  Results are identical for
    any parallelism degree."""
    factuals = np.asarray(factuals, dtype=np.float64)
    if factuals.ndim != 2:
        raise ConfigError("factuals must be a (N, D) matrix")
    _strip_caches(vae, clf)
    if parallelism <= 1:
        with threadpool_limits(limits=1):
            return [_safe_one(vae, clf, row, config) for row in factuals]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(
        parallelism, initializer=_init_worker, initargs=(vae, clf, factuals, config)
    ) as pool:
        return pool.map(_worker_one, range(factuals.shape[0]))


# --- trajectory files ------------------------------------------------------


def trajectory_to_dict(traj: CeTrajectory, index: int) -> dict:
    return {
        "index": index,
        "optimizer": traj.optimizer,
        "alpha": traj.alpha,
        "eta": traj.eta,
        "target": traj.target,
        "valid": traj.valid,
        "error": traj.error,
        "stalled": traj.stalled,
        "first_hits": {repr(k): v for k, v in traj.first_hits.items()},
        "factual": traj.factual.tolist(),
        "steps": [
            {
                "z": s.z.tolist(),
                "x_hat": s.x_hat.tolist(),
                "confidence": s.confidence,
                "loss": s.loss,
                "grad_norm": s.grad_norm,
                "jitter": s.jitter,
            }
            for s in traj.steps
        ],
    }


def trajectory_from_dict(record: dict) -> CeTrajectory:
    traj = CeTrajectory(
        factual=np.asarray(record["factual"], dtype=np.float64),
        target=record["target"],
        optimizer=record["optimizer"],
        alpha=record["alpha"],
        eta=record["eta"],
        valid=record["valid"],
        error=record["error"],
        stalled=record["stalled"],
        first_hits={float(k): v for k, v in record["first_hits"].items()},
    )
    traj.steps = [
        CeStep(
            z=np.asarray(s["z"], dtype=np.float64),
            x_hat=np.asarray(s["x_hat"], dtype=np.float64),
            confidence=s["confidence"],
            loss=s["loss"],
            grad_norm=s["grad_norm"],
            jitter=s["jitter"],
        )
        for s in record["steps"]
    ]
    return traj


def write_trajectories(path, trajectories: list[CeTrajectory]) -> None:
    """One JSON record per line; floats keep full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for index, traj in enumerate(trajectories):
            fh.write(
                json.dumps(
                    trajectory_to_dict(traj, index),
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def read_trajectories(path) -> list[CeTrajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trajectory_from_dict(json.loads(line)))
    return out


def _nearest_distances(points: np.ndarray, train_matrix: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each row to the training matrix."""
    sq_train = (train_matrix**2).sum(axis=1)
    out = np.empty(points.shape[0])
    for start in range(0, points.shape[0], 128):
        chunk = points[start : start + 128]
        d2 = (chunk**2).sum(axis=1)[:, None] + sq_train[None, :] - 2.0 * (
            chunk @ train_matrix.T
        )
        out[start : start + 128] = np.sqrt(np.maximum(d2, 0.0)).min(axis=1)
    return out


def write_trajectory_summary(path, trajectories, train_matrix) -> None:
    """Per-factual per-step CSV (step, confidence, realism, closeness)."""
    train_matrix = np.asarray(train_matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,step,confidence,l_d,l2\n")
        for index, traj in enumerate(trajectories):
            if not traj.steps:
                continue
            points = np.stack([s.x_hat for s in traj.steps])
            l_d = _nearest_distances(points, train_matrix)
            l2 = np.linalg.norm(points - traj.factual, axis=1)
            for t, step in enumerate(traj.steps):
                fh.write(
                    f"{index},{t},{step.confidence:.6g},{l_d[t]:.6g},{l2[t]:.6g}\n"
                )
