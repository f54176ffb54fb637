"""Classifier and VAE definitions plus their training routines.

The classifier is a BatchNorm/tanh MLP representation followed by a
linear-sigmoid head.  The VAE is trained in two stages: a deterministic
warm-up of the encoder and decoder mean under a beta-weighted KL penalty,
then a decoder-variance fit where those parameters are frozen and an RBF
precision network is optimized by maximum likelihood on the training
reconstructions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import cdist

from . import checkpoint, nn
from .errors import ConfigError, ShapeError, StateError


@dataclass
class ClassifierModel:
    representation_net: nn.DenseNet  # ambient -> representation space
    head_weight: np.ndarray  # (H,)
    head_bias: float
    train_balanced_accuracy: float | None = None
    test_balanced_accuracy: float | None = None

    @property
    def ambient_dim(self) -> int:
        return self.representation_net.in_dim

    @property
    def rep_dim(self) -> int:
        return self.head_weight.shape[0]


def representation(clf: ClassifierModel, x) -> np.ndarray:
    """Learned representation h(x); deterministic in inference mode."""
    return nn.forward(clf.representation_net, x, mode="infer")


def classify_logit(clf: ClassifierModel, x):
    rep = representation(clf, x)
    return rep @ clf.head_weight + clf.head_bias


def classify(clf: ClassifierModel, x):
    """Positive-class probability, strictly inside (0, 1)."""
    return nn.sigmoid(classify_logit(clf, x))


@dataclass
class RbfVariance:
    """Decoder precision field: a floor plus non-negative RBF kernels.

    precision_j(z) = sum_k weights[j,k] * exp(-|z - centers[k]|^2 / (2*bandwidth^2)) + floor
    sigma_j(z) = precision_j(z) ** -0.5
    """

    centers: np.ndarray  # (K, d)
    weights: np.ndarray  # (D, K), entries >= 0
    bandwidth: float
    floor: float

    @property
    def sigma_max(self) -> float:
        return float(self.floor**-0.5)

    def kernels(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            d2 = ((z[None, :] - self.centers) ** 2).sum(axis=1)
        else:
            d2 = cdist(z, self.centers, "sqeuclidean")
        return np.exp(-d2 / (2.0 * self.bandwidth**2))

    def precision(self, z) -> np.ndarray:
        return self.kernels(z) @ self.weights.T + self.floor

    def sigma(self, z) -> np.ndarray:
        return self.precision(z) ** -0.5


@dataclass
class VaeModel:
    encoder_trunk: nn.DenseNet  # ambient -> last hidden (may be empty)
    encoder_mean_head: nn.DenseNet  # last hidden -> latent
    encoder_var_head: nn.DenseNet | None  # posterior variance, KL only
    decoder_mean_net: nn.DenseNet  # latent -> ambient
    variance: RbfVariance | None
    latent_dim: int
    ambient_dim: int


def encode(vae: VaeModel, x) -> np.ndarray:
    """Posterior mean of the latent code."""
    h = nn.forward(vae.encoder_trunk, x, mode="infer")
    return nn.forward(vae.encoder_mean_head, h, mode="infer")


def decode_mean(vae: VaeModel, z) -> np.ndarray:
    """Expected decoder output at z."""
    return nn.forward(vae.decoder_mean_net, z, mode="infer")


def decoder_sigma(vae: VaeModel, z) -> np.ndarray:
    """Calibrated per-output decoder noise scale at z."""
    if vae.variance is None:
        raise StateError("decoder variance not fitted; run fit_decoder_variance")
    return vae.variance.sigma(z)


def balanced_accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    pos = y_true.sum()
    neg = y_true.size - pos
    tpr = (y_pred & y_true).sum() / pos if pos else 0.0
    tnr = (~y_pred & ~y_true).sum() / neg if neg else 0.0
    return 0.5 * (tpr + tnr)


@dataclass
class ClassifierConfig:
    rep_dim: int = 24
    lr: float = 1e-5
    l2: float = 0.05
    epochs: int = 20
    batch_size: int = 1024
    seed: int = 0
    optimizer: str = "rmsprop"


def train_classifier(
    train_x,
    train_y,
    config: ClassifierConfig,
    test_x=None,
    test_y=None,
) -> tuple[ClassifierModel, list[dict]]:
    """Train the representation MLP plus linear head on binary labels.

    The representation is a 4-layer MLP with 2H, 2H, H, H neurons,
    BatchNorm and tanh on every layer; the head is a single linear unit
    trained through a sigmoid BCE loss.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64).ravel()
    if train_x.ndim != 2 or train_x.shape[0] != train_y.shape[0]:
        raise ShapeError("train_x must be (N, D) matching train_y")
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ConfigError("training data contains a single class")

    rng = nn.make_rng(config.seed)
    h = config.rep_dim
    ambient = train_x.shape[1]
    rep_net = nn.build_mlp(
        rng,
        [ambient, 2 * h, 2 * h, h, h],
        hidden_activation="tanh",
        out_activation="tanh",
        batchnorm=True,
        batchnorm_out=True,
    )
    head = nn.DenseNet([nn.dense_layer(rng, h, 1, "identity")])
    full = nn.compose(rep_net, head)
    params = nn.net_params(full)
    opt = nn.make_optimizer(config.optimizer, config.lr)

    n = train_x.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue  # BatchNorm needs at least 2 rows
            xb = train_x[idx]
            yb = train_y[idx]
            logit = nn.forward(full, xb, mode="train")[:, 0]
            # mean BCE from logits: softplus(l) - y*l
            losses.append(float(np.mean(nn.softplus(logit) - yb * logit)))
            upstream = ((nn.sigmoid(logit) - yb) / idx.size)[:, None]
            grads, _ = nn.backprop(full, upstream, l2=config.l2)
            nn.optimizer_step(opt, params, grads)
        probe = ClassifierModel(
            representation_net=rep_net,
            head_weight=head.layers[0].weight[0],
            head_bias=float(head.layers[0].bias[0]),
        )
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_balanced_accuracy": balanced_accuracy(
                train_y, classify(probe, train_x) >= 0.5
            ),
        }
        if test_x is not None and test_y is not None:
            row["test_balanced_accuracy"] = balanced_accuracy(
                np.asarray(test_y).ravel(),
                classify(probe, np.asarray(test_x)) >= 0.5,
            )
        history.append(row)

    model = ClassifierModel(
        representation_net=rep_net,
        head_weight=head.layers[0].weight[0].copy(),
        head_bias=float(head.layers[0].bias[0]),
        train_balanced_accuracy=history[-1]["train_balanced_accuracy"],
        test_balanced_accuracy=history[-1].get("test_balanced_accuracy"),
    )
    for net in (rep_net, head, full):
        net._cache = None
    return model, history


@dataclass
class VaeConfig:
    latent_dim: int = 5
    hidden_dims: tuple[int, ...] = (512, 256)
    beta: float = 1e-4
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 512
    seed: int = 0
    batchnorm: bool = True
    decoder_out_activation: str = "sigmoid"


def build_vae(ambient_dim: int, config: VaeConfig, rng: np.random.Generator) -> VaeModel:
    hidden = list(config.hidden_dims)
    d = config.latent_dim
    if hidden:
        trunk = nn.build_mlp(
            rng,
            [ambient_dim] + hidden,
            hidden_activation="tanh",
            out_activation="tanh",
            batchnorm=config.batchnorm,
            batchnorm_out=config.batchnorm,
        )
        head_in = hidden[-1]
    else:
        trunk = nn.DenseNet([])
        head_in = ambient_dim
    mean_head = nn.DenseNet([nn.dense_layer(rng, head_in, d, "identity")])
    var_head = nn.DenseNet([nn.dense_layer(rng, head_in, d, "softplus")])
    decoder = nn.build_mlp(
        rng,
        [d] + hidden[::-1] + [ambient_dim],
        hidden_activation="tanh",
        out_activation=config.decoder_out_activation,
        batchnorm=config.batchnorm,
        batchnorm_out=False,
    )
    return VaeModel(
        encoder_trunk=trunk,
        encoder_mean_head=mean_head,
        encoder_var_head=var_head,
        decoder_mean_net=decoder,
        variance=None,
        latent_dim=d,
        ambient_dim=ambient_dim,
    )


def train_vae_warmup(train_x, config: VaeConfig) -> tuple[VaeModel, list[dict]]:
    """Deterministic warm-up of encoder and decoder mean.

    The reconstruction uses the posterior mean directly (unit-variance
    Gaussian likelihood); the posterior-variance head only feeds the
    beta-weighted KL term.  The decoder's RBF variance is untouched.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    n, ambient = train_x.shape
    if config.latent_dim >= ambient:
        raise ConfigError(
            f"latent dim {config.latent_dim} must be < ambient dim {ambient}"
        )
    rng = nn.make_rng(config.seed)
    vae = build_vae(ambient, config, rng)
    nets = {
        "trunk": vae.encoder_trunk,
        "mean": vae.encoder_mean_head,
        "var": vae.encoder_var_head,
        "decoder": vae.decoder_mean_net,
    }
    params: dict[str, np.ndarray] = {}
    for label, net in nets.items():
        for name, arr in nn.net_params(net).items():
            params[f"{label}.{name}"] = arr
    opt = nn.make_optimizer("adam", config.lr)

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        recon_sum = 0.0
        kl_sum = 0.0
        count = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            xb = train_x[idx]
            b = idx.size
            hb = nn.forward(vae.encoder_trunk, xb, mode="train")
            mb = nn.forward(vae.encoder_mean_head, hb, mode="train")
            s2b = nn.forward(vae.encoder_var_head, hb, mode="train")
            xhat = nn.forward(vae.decoder_mean_net, mb, mode="train")

            recon = 0.5 * np.sum((xb - xhat) ** 2) / b
            kl = 0.5 * np.sum(mb**2 + s2b - np.log(s2b) - 1.0) / b
            recon_sum += recon * b
            kl_sum += kl * b
            count += b

            g_dec, d_z = nn.backprop(vae.decoder_mean_net, (xhat - xb) / b)
            d_mean = d_z + config.beta * mb / b
            d_s2 = config.beta * 0.5 * (1.0 - 1.0 / s2b) / b
            g_mean, d_h1 = nn.backprop(vae.encoder_mean_head, d_mean)
            g_var, d_h2 = nn.backprop(vae.encoder_var_head, d_s2)
            grads = {f"decoder.{k}": v for k, v in g_dec.items()}
            grads.update({f"mean.{k}": v for k, v in g_mean.items()})
            grads.update({f"var.{k}": v for k, v in g_var.items()})
            if vae.encoder_trunk.layers:
                g_trunk, _ = nn.backprop(vae.encoder_trunk, d_h1 + d_h2)
                grads.update({f"trunk.{k}": v for k, v in g_trunk.items()})
            nn.optimizer_step(opt, params, grads)
        history.append(
            {
                "epoch": epoch,
                "recon": recon_sum / count,
                "kl": kl_sum / count,
                "loss": (recon_sum + config.beta * kl_sum) / count,
            }
        )
    for net in nets.values():
        net._cache = None
    return vae, history


@dataclass
class RbfConfig:
    centers: int = 200
    bandwidth: float = 0.01
    # "absolute": bandwidth is the kernel length scale as-is;
    # "scaled": multiple of the median nearest-neighbor center spacing.
    bandwidth_mode: str = "absolute"
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 512
    floor: float = 1e-6
    seed: int = 0
    kmeans_iters: int = 50


def _median_center_spacing(centers: np.ndarray) -> float:
    d2 = cdist(centers, centers, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(d2.min(axis=1))))


def fit_decoder_variance(
    vae: VaeModel, train_x, config: RbfConfig
) -> tuple[VaeModel, list[dict]]:
    """Fit the RBF decoder precision with encoder/decoder-mean frozen.

    Centers come from seeded k-means++ on the training latent means;
    non-negative weights (softplus-parameterized) maximize the Gaussian
    log-likelihood of the training reconstruction residuals.  The frozen
    nets are shared by reference, so their parameters stay bit-identical.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    n = train_x.shape[0]
    if config.centers > n:
        raise ConfigError(f"{config.centers} centers > {n} training points")
    if config.bandwidth <= 0 or config.floor <= 0:
        raise ConfigError("bandwidth and floor must be positive")

    codes = encode(vae, train_x)
    residual_sq = (train_x - decode_mean(vae, codes)) ** 2

    rng = nn.make_rng(config.seed)
    centers, _ = kmeans2(
        codes, config.centers, iter=config.kmeans_iters, minit="++", rng=rng
    )
    if config.bandwidth_mode == "scaled":
        if config.centers < 2:
            raise ConfigError("scaled bandwidth needs at least 2 centers")
        bandwidth = config.bandwidth * _median_center_spacing(centers)
    elif config.bandwidth_mode == "absolute":
        bandwidth = config.bandwidth
    else:
        raise ConfigError(f"unknown bandwidth_mode {config.bandwidth_mode!r}")

    # kernel matrix is constant during the fit: codes and centers are frozen
    kernel = np.exp(-cdist(codes, centers, "sqeuclidean") / (2.0 * bandwidth**2))

    ambient = train_x.shape[1]
    raw = np.full((ambient, config.centers), nn.softplus_inverse(1.0))
    params = {"raw": raw}
    opt = nn.make_optimizer("adam", config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        nll_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            kb = kernel[idx]
            rb = residual_sq[idx]
            b = idx.size
            weights = nn.softplus(raw)
            gamma = kb @ weights.T + config.floor
            nll = 0.5 * np.sum(gamma * rb - np.log(gamma)) / b
            nll_sum += nll * b
            d_gamma = 0.5 * (rb - 1.0 / gamma) / b
            grad = {"raw": (d_gamma.T @ kb) * nn.sigmoid(raw)}
            nn.optimizer_step(opt, params, grad)
        history.append({"epoch": epoch, "nll": nll_sum / n})

    variance = RbfVariance(
        centers=centers,
        weights=nn.softplus(raw),
        bandwidth=float(bandwidth),
        floor=config.floor,
    )
    return replace(vae, variance=variance), history


# --- checkpoint serialization -------------------------------------------


def save_classifier(path, clf: ClassifierModel) -> None:
    spec, arrays = nn.net_manifest(clf.representation_net, prefix="rep.")
    arrays["head.weight"] = clf.head_weight
    arrays["head.bias"] = np.asarray([clf.head_bias])
    meta = {
        "rep_spec": spec,
        "train_balanced_accuracy": clf.train_balanced_accuracy,
        "test_balanced_accuracy": clf.test_balanced_accuracy,
    }
    checkpoint.save_blob(path, "classifier", meta, arrays)


def load_classifier(path) -> ClassifierModel:
    kind, meta, arrays = checkpoint.load_blob(path)
    if kind != "classifier":
        raise ConfigError(f"{path}: expected classifier checkpoint, got {kind!r}")
    return ClassifierModel(
        representation_net=nn.net_from_manifest(meta["rep_spec"], arrays, prefix="rep."),
        head_weight=arrays["head.weight"],
        head_bias=float(arrays["head.bias"][0]),
        train_balanced_accuracy=meta.get("train_balanced_accuracy"),
        test_balanced_accuracy=meta.get("test_balanced_accuracy"),
    )


def save_vae(path, vae: VaeModel) -> None:
    meta: dict = {"latent_dim": vae.latent_dim, "ambient_dim": vae.ambient_dim}
    arrays: dict[str, np.ndarray] = {}
    for label, net in (
        ("trunk", vae.encoder_trunk),
        ("mean", vae.encoder_mean_head),
        ("var", vae.encoder_var_head),
        ("decoder", vae.decoder_mean_net),
    ):
        if net is None:
            meta[f"{label}_spec"] = None
            continue
        spec, net_arrays = nn.net_manifest(net, prefix=f"{label}.")
        meta[f"{label}_spec"] = spec
        arrays.update(net_arrays)
    if vae.variance is not None:
        meta["variance"] = {
            "bandwidth": vae.variance.bandwidth,
            "floor": vae.variance.floor,
        }
        arrays["variance.centers"] = vae.variance.centers
        arrays["variance.weights"] = vae.variance.weights
    else:
        meta["variance"] = None
    checkpoint.save_blob(path, "vae", meta, arrays)


def load_vae(path) -> VaeModel:
    kind, meta, arrays = checkpoint.load_blob(path)
    if kind != "vae":
        raise ConfigError(f"{path}: expected vae checkpoint, got {kind!r}")
    nets = {}
    for label in ("trunk", "mean", "var", "decoder"):
        spec = meta[f"{label}_spec"]
        nets[label] = (
            None if spec is None else nn.net_from_manifest(spec, arrays, prefix=f"{label}.")
        )
    variance = None
    if meta["variance"] is not None:
        variance = RbfVariance(
            centers=arrays["variance.centers"],
            weights=arrays["variance.weights"],
            bandwidth=meta["variance"]["bandwidth"],
            floor=meta["variance"]["floor"],
        )
    return VaeModel(
        encoder_trunk=nets["trunk"],
        encoder_mean_head=nets["mean"],
        encoder_var_head=nets["var"],
        decoder_mean_net=nets["decoder"],
        variance=variance,
        latent_dim=int(meta["latent_dim"]),
        ambient_dim=int(meta["ambient_dim"]),
    )
