"""Riemannian metrics induced by the decoder and the classifier.

The latent metric is the expected pull-back of the stochastic decoder,
J_mean^T J_mean + J_sigma^T J_sigma.  The enhanced variant replaces the
Euclidean ambient inner product with the classifier-representation
pull-back J_h^T J_h evaluated at the decoded mean.  Metrics are jittered
to positive definiteness and solved through Cholesky factorizations;
no explicit inverses are formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import nn
from .errors import NumericError, ShapeError, SingularMetricError, StateError
from .models import ClassifierModel, VaeModel, decode_mean

# escalation schedule for the diagonal jitter; the last value is the cap
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass
class MetricTensor:
    point: np.ndarray  # latent location
    matrix: np.ndarray  # (d, d), symmetric positive definite after jitter
    kind: str  # euclidean | pullback | enhanced
    jitter: float
    chol: np.ndarray = field(repr=False, compare=False, default=None)


@dataclass
class AmbientMetric:
    point: np.ndarray
    matrix: np.ndarray  # (D, D), PSD Gram matrix of the representation Jacobian


def _spd_cholesky(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Factor a symmetric matrix, escalating diagonal jitter until PD."""
    eye = np.eye(matrix.shape[0])
    for jitter in JITTERS:
        candidate = matrix + jitter * eye if jitter else matrix
        try:
            chol = scipy.linalg.cholesky(candidate, lower=True)
            return candidate, chol, jitter
        except scipy.linalg.LinAlgError:
            continue
    raise SingularMetricError(
        f"metric not positive definite at maximum jitter {JITTERS[-1]:g}"
    )


def _finite(arr, what: str, point) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what} at point {np.asarray(point).tolist()}")
    return arr


def decoder_jacobians(vae: VaeModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of decoder mean and calibrated sigma at z, both (D, d)."""
    z = np.asarray(z, dtype=np.float64)
    jac_mean = nn.jacobian(vae.decoder_mean_net, z)
    if vae.variance is None:
        raise StateError("decoder variance not fitted; run fit_decoder_variance")
    rbf = vae.variance
    kernels = rbf.kernels(z)  # (K,)
    precision = kernels @ rbf.weights.T + rbf.floor  # (D,)
    # d precision / dz = -(1/bw^2) * sum_k w_jk kernel_k (z - c_k)
    diff = z[None, :] - rbf.centers  # (K, d)
    d_precision = -(rbf.weights * kernels[None, :]) @ diff / rbf.bandwidth**2
    jac_sigma = -0.5 * precision[:, None] ** -1.5 * d_precision
    return (
        _finite(jac_mean, "decoder-mean Jacobian", z),
        _finite(jac_sigma, "decoder-sigma Jacobian", z),
    )


def pullback_metric(vae: VaeModel, z) -> MetricTensor:
    """Expected decoder pull-back metric at z."""
    jac_mean, jac_sigma = decoder_jacobians(vae, z)
    matrix = jac_mean.T @ jac_mean + jac_sigma.T @ jac_sigma
    matrix = 0.5 * (matrix + matrix.T)
    matrix, chol, jitter = _spd_cholesky(matrix)
    return MetricTensor(np.asarray(z, float), matrix, "pullback", jitter, chol)


def ambient_metric(clf: ClassifierModel, x) -> AmbientMetric:
    """Representation pull-back in the ambient space: J_h^T J_h."""
    jac_rep = nn.jacobian(clf.representation_net, np.asarray(x, dtype=np.float64))
    matrix = jac_rep.T @ jac_rep
    return AmbientMetric(np.asarray(x, float), _finite(matrix, "ambient metric", x))


def enhanced_metric(vae: VaeModel, clf: ClassifierModel, z) -> MetricTensor:
    """Classifier-enhanced pull-back at z, evaluated at the decoded mean."""
    # a pass-through representation (empty net) adapts to any ambient dim
    if clf.ambient_dim is not None and clf.ambient_dim != vae.ambient_dim:
        raise ShapeError(
            f"classifier input dim {clf.ambient_dim} != decoder output dim "
            f"{vae.ambient_dim}"
        )
    jac_mean, jac_sigma = decoder_jacobians(vae, z)
    ambient = ambient_metric(clf, decode_mean(vae, z)).matrix
    matrix = jac_mean.T @ (ambient @ jac_mean) + jac_sigma.T @ (ambient @ jac_sigma)
    matrix = 0.5 * (matrix + matrix.T)
    matrix, chol, jitter = _spd_cholesky(matrix)
    return MetricTensor(np.asarray(z, float), matrix, "enhanced", jitter, chol)


def identity_metric(z) -> MetricTensor:
    z = np.asarray(z, dtype=np.float64)
    eye = np.eye(z.shape[0])
    return MetricTensor(z, eye, "euclidean", 0.0, eye.copy())


def riemannian_gradient(metric: MetricTensor, euclidean_grad) -> np.ndarray:
    """Solve M r = grad through the cached Cholesky factor."""
    grad = np.asarray(euclidean_grad, dtype=np.float64)
    if grad.shape != (metric.matrix.shape[0],):
        raise ShapeError(
            f"gradient shape {grad.shape} != metric dim {metric.matrix.shape[0]}"
        )
    chol = metric.chol
    if chol is None:
        _, chol, _ = _spd_cholesky(metric.matrix)
    return scipy.linalg.cho_solve((chol, True), grad)


def metric_volume(metric: MetricTensor) -> float:
    """Volume measure sqrt(det M), the local traversal cost."""
    chol = metric.chol
    if chol is None:
        _, chol, _ = _spd_cholesky(metric.matrix)
    return float(np.prod(np.diag(chol)))
