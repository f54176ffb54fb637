"""Counterfactual evaluation: validity, closeness, realism, violations,
confidence-threshold curves and the tabular report files.

Distance metrics are aggregated over valid (flipped) counterfactuals
only; flip ratio, confidence and violations cover the whole batch.  All
distances live in the normalized [0, 1] feature space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .counterfactual import CeTrajectory
from .errors import ConfigError
from .models import ClassifierModel, classify

DEFAULT_CHANGE_TOLERANCE = 1e-5  # |delta| above this counts as "changed"


def realism_distance(x_ce, train_matrix) -> float:
    """Exact Euclidean distance to the closest training row (brute force).

    Row sums accumulate coordinate-by-coordinate so the result matches a
    naive double loop bit for bit.
    """
    train_matrix = np.asarray(train_matrix, dtype=np.float64)
    if train_matrix.ndim != 2 or train_matrix.shape[0] == 0:
        raise ConfigError("train matrix must be a non-empty (N, D) array")
    diff = train_matrix - np.asarray(x_ce, dtype=np.float64)
    dist_sq = np.zeros(train_matrix.shape[0])
    for j in range(train_matrix.shape[1]):
        dist_sq += diff[:, j] * diff[:, j]
    return float(np.sqrt(dist_sq.min()))


def realism_distances(points, train_matrix) -> np.ndarray:
    """Vectorized nearest-training distances for a batch of rows."""
    train_matrix = np.asarray(train_matrix, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    sq_train = (train_matrix**2).sum(axis=1)
    out = np.empty(points.shape[0])
    for start in range(0, points.shape[0], 128):
        chunk = points[start : start + 128]
        d2 = (
            (chunk**2).sum(axis=1)[:, None]
            + sq_train[None, :]
            - 2.0 * (chunk @ train_matrix.T)
        )
        out[start : start + 128] = np.sqrt(np.maximum(d2, 0.0)).min(axis=1)
    return out


def closeness(
    x_ce, x_factual, change_tolerance: float = DEFAULT_CHANGE_TOLERANCE
) -> tuple[float, float, float, float]:
    """(L0, L1, L2, Linf) distances to the factual.

    L0 counts coordinates whose change exceeds the tolerance; the others
    are the standard norms.
    """
    delta = np.asarray(x_ce, dtype=np.float64) - np.asarray(x_factual, dtype=np.float64)
    ab = np.abs(delta)
    return (
        float(np.count_nonzero(ab > change_tolerance)),
        float(ab.sum()),
        float(np.sqrt((delta * delta).sum())),
        float(ab.max()) if ab.size else 0.0,
    )


def validity(clf: ClassifierModel, x_ce, target: int) -> tuple[bool, float]:
    """Flip flag and target-oriented confidence of a counterfactual."""
    prob = float(classify(clf, np.asarray(x_ce, dtype=np.float64)))
    confidence = prob if target == 1 else 1.0 - prob
    return confidence >= 0.5, confidence


def violation_count(
    x_ce,
    x_factual,
    immutable_mask,
    change_tolerance: float = DEFAULT_CHANGE_TOLERANCE,
) -> int:
    """Number of immutable coordinates changed beyond the tolerance."""
    mask = np.asarray(immutable_mask, dtype=bool)
    delta = np.abs(
        np.asarray(x_ce, dtype=np.float64) - np.asarray(x_factual, dtype=np.float64)
    )
    return int(np.count_nonzero(delta[mask] > change_tolerance))


@dataclass
class TrajectoryScore:
    l_d: float
    l0: float
    l1: float
    l2: float
    l_inf: float
    confidence: float  # at the final step
    flipped: bool
    violations: int
    flip_step: int | None  # first step reaching confidence 0.5
    confidence_at_flip: float | None


def score_trajectory(
    traj: CeTrajectory,
    clf: ClassifierModel,
    train_matrix,
    immutable_mask,
    change_tolerance: float = DEFAULT_CHANGE_TOLERANCE,
) -> TrajectoryScore:
    if not traj.valid or not traj.steps:
        return TrajectoryScore(
            np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, False, 0, None, None
        )
    x_ce = traj.x_ce
    flipped, confidence = validity(clf, x_ce, traj.target)
    l0, l1, l2, l_inf = closeness(x_ce, traj.factual, change_tolerance)
    flip_step = None
    confidence_at_flip = None
    for idx in range(1, len(traj.steps)):
        if traj.steps[idx].confidence >= 0.5:
            flip_step = idx
            confidence_at_flip = traj.steps[idx].confidence
            break
    return TrajectoryScore(
        l_d=realism_distance(x_ce, train_matrix),
        l0=l0,
        l1=l1,
        l2=l2,
        l_inf=l_inf,
        confidence=confidence,
        flipped=flipped,
        violations=violation_count(x_ce, traj.factual, immutable_mask, change_tolerance),
        flip_step=flip_step,
        confidence_at_flip=confidence_at_flip,
    )


@dataclass
class CeMetrics:
    n_total: int
    n_flipped: int
    flip_ratio: float
    violation_mean: float
    confidence_mean: float
    confidence_std: float
    confidence_flip_mean: float
    confidence_flip_std: float
    distance_means: dict[str, float]  # over flipped CEs only
    distance_stds: dict[str, float]


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def aggregate(scores: list[TrajectoryScore]) -> CeMetrics:
    ok = [s for s in scores if not np.isnan(s.confidence)]
    flipped = [s for s in scores if s.flipped]
    conf_mean, conf_std = _mean_std([s.confidence for s in ok])
    flip_conf_mean, flip_conf_std = _mean_std(
        [s.confidence_at_flip for s in flipped if s.confidence_at_flip is not None]
    )
    means = {}
    stds = {}
    for key in ("l_d", "l0", "l1", "l2", "l_inf"):
        means[key], stds[key] = _mean_std([getattr(s, key) for s in flipped])
    return CeMetrics(
        n_total=len(scores),
        n_flipped=len(flipped),
        flip_ratio=len(flipped) / len(scores) if scores else float("nan"),
        violation_mean=float(np.mean([s.violations for s in scores]))
        if scores
        else float("nan"),
        confidence_mean=conf_mean,
        confidence_std=conf_std,
        confidence_flip_mean=flip_conf_mean,
        confidence_flip_std=flip_conf_std,
        distance_means=means,
        distance_stds=stds,
    )


def ctr_curve(
    trajectories: list[CeTrajectory],
    thresholds,
    clf: ClassifierModel,
    train_matrix,
) -> list[dict]:
    """Per-threshold CTR and mean realism/closeness/steps at first hits.

    CTR is the fraction of trajectories that ever reach the threshold
    (step 0 excluded); the quality metrics average over the first-hit
    counterfactuals only.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigError("threshold list must not be empty")
    train_matrix = np.asarray(train_matrix, dtype=np.float64)

    confidences = [t.confidences for t in trajectories]
    hit_steps = np.full((len(trajectories), len(thresholds)), -1, dtype=np.int64)
    for i, conf in enumerate(confidences):
        if conf.size < 2:
            continue
        for j, tau in enumerate(thresholds):
            hits = np.nonzero(conf[1:] >= tau)[0]
            if hits.size:
                hit_steps[i, j] = hits[0] + 1

    # realism distances for the distinct hit points, computed in one batch
    pairs = sorted(
        {(i, int(s)) for i, row in enumerate(hit_steps) for s in row if s >= 0}
    )
    l_d_cache: dict[tuple[int, int], float] = {}
    if pairs:
        points = np.stack([trajectories[i].steps[s].x_hat for i, s in pairs])
        dists = realism_distances(points, train_matrix)
        l_d_cache = {pair: float(d) for pair, d in zip(pairs, dists)}

    rows = []
    for j, tau in enumerate(thresholds):
        hit = hit_steps[:, j] >= 0
        if hit.any():
            idx = np.nonzero(hit)[0]
            l_d = np.mean([l_d_cache[(i, int(hit_steps[i, j]))] for i in idx])
            l2 = np.mean(
                [
                    closeness(
                        trajectories[i].steps[int(hit_steps[i, j])].x_hat,
                        trajectories[i].factual,
                    )[2]
                    for i in idx
                ]
            )
            iters = float(hit_steps[idx, j].mean())
        else:
            l_d = l2 = iters = float("nan")
        rows.append(
            {
                "threshold": float(tau),
                "ctr": float(hit.mean()) if len(trajectories) else float("nan"),
                "l_d": float(l_d),
                "l2": float(l2),
                "iters": iters,
            }
        )
    return rows


# --- report files -------------------------------------------------------------

REPORT_COLUMNS = [
    "n_iter",
    "constraints",
    "optimizer",
    "seed",
    "l_d_mean",
    "l_d_std",
    "l0_mean",
    "l0_std",
    "l1_mean",
    "l1_std",
    "l2_mean",
    "l2_std",
    "linf_mean",
    "linf_std",
    "confidence_mean",
    "confidence_std",
    "confidence_flip_mean",
    "confidence_flip_std",
    "fr",
    "violation",
]

CURVE_COLUMNS = ["threshold", "ctr", "l_d", "l2", "iters"]


def _metrics_row(n_iter, constraints, optimizer, seed, metrics: CeMetrics) -> dict:
    return {
        "n_iter": n_iter,
        "constraints": bool(constraints),
        "optimizer": optimizer,
        "seed": seed,
        "l_d_mean": metrics.distance_means["l_d"],
        "l_d_std": metrics.distance_stds["l_d"],
        "l0_mean": metrics.distance_means["l0"],
        "l0_std": metrics.distance_stds["l0"],
        "l1_mean": metrics.distance_means["l1"],
        "l1_std": metrics.distance_stds["l1"],
        "l2_mean": metrics.distance_means["l2"],
        "l2_std": metrics.distance_stds["l2"],
        "linf_mean": metrics.distance_means["l_inf"],
        "linf_std": metrics.distance_stds["l_inf"],
        "confidence_mean": metrics.confidence_mean,
        "confidence_std": metrics.confidence_std,
        "confidence_flip_mean": metrics.confidence_flip_mean,
        "confidence_flip_std": metrics.confidence_flip_std,
        "fr": metrics.flip_ratio,
        "violation": metrics.violation_mean,
    }


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def report(cells: list[dict], csv_path, json_path) -> list[dict]:
    """Aggregate per-cell scores into the report tables.

    Each cell is {n_iter, constraints, optimizer, seed, scores}.  Rows are
    emitted per cell; when a (n_iter, constraints, optimizer) key spans
    several seeds, a pooled row over the concatenated scores is added with
    seed="pooled".
    """
    rows = []
    grouped: dict[tuple, list[dict]] = {}
    for cell in cells:
        key = (cell["n_iter"], bool(cell["constraints"]), cell["optimizer"])
        grouped.setdefault(key, []).append(cell)
    for key in sorted(grouped, key=lambda k: (k[0], k[1], k[2])):
        members = sorted(grouped[key], key=lambda c: str(c["seed"]))
        for cell in members:
            rows.append(
                _metrics_row(*key, cell["seed"], aggregate(cell["scores"]))
            )
        if len(members) > 1:
            pooled = [s for cell in members for s in cell["scores"]]
            rows.append(_metrics_row(*key, "pooled", aggregate(pooled)))

    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in REPORT_COLUMNS) + "\n")
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rows


def write_curve_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(float(row[c])) for c in CURVE_COLUMNS) + "\n")
