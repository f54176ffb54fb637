"""Minimal dense neural-network kernel.

Plain-numpy MLPs with tanh/sigmoid/softplus/identity activations and
optional BatchNorm, supporting three things the rest of the package needs:
batched training forward/backward passes, deterministic inference, and
exact input-output Jacobians computed by forward accumulation of per-layer
derivative matrices.  Everything is float64.

An inference-mode network is a pure, twice-differentiable function of its
input: BatchNorm always uses running statistics there, which is the form
the geometry code differentiates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError

ACTIVATIONS = ("tanh", "sigmoid", "softplus", "identity")

RNG_ALGORITHM = "pcg64"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives a bit-identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(root_seed: int, label: str) -> int:
    """Stable 63-bit subseed for a named component.

    Hash-based fan-out, so adding a component never perturbs the streams
    of existing ones.
    """
    digest = hashlib.blake2b(
        f"{int(root_seed)}:{label}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") >> 1


def sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def softplus(u):
    return np.logaddexp(0.0, np.asarray(u, dtype=np.float64))


def softplus_inverse(v):
    # inverse of log(1 + e^u); v must be > 0
    v = np.asarray(v, dtype=np.float64)
    return v + np.log(-np.expm1(-v))


def activation(name: str, u):
    if name == "tanh":
        return np.tanh(u)
    if name == "sigmoid":
        return sigmoid(u)
    if name == "softplus":
        return softplus(u)
    if name == "identity":
        return u
    raise ConfigError(f"unknown activation {name!r}")


def activation_deriv(name: str, u):
    """Derivative of the activation at preactivation u."""
    if name == "tanh":
        t = np.tanh(u)
        return 1.0 - t * t
    if name == "sigmoid":
        s = sigmoid(u)
        return s * (1.0 - s)
    if name == "softplus":
        return sigmoid(u)
    if name == "identity":
        return np.ones_like(np.asarray(u, dtype=np.float64))
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class BatchNorm:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1  # fraction of the batch statistic blended in per step


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"
    batchnorm: BatchNorm | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    """Sequence of [linear -> optional BatchNorm -> activation] layers.

    An empty layer list is the identity map (used for pass-through
    representation nets in tests and compositions).
    """

    layers: list[Layer] = field(default_factory=list)
    _cache: list | None = field(default=None, repr=False, compare=False)

    @property
    def in_dim(self) -> int | None:
        return self.layers[0].in_dim if self.layers else None

    @property
    def out_dim(self) -> int | None:
        return self.layers[-1].out_dim if self.layers else None


def validate(net: DenseNet) -> None:
    """Check dimension chaining, activation tags and BatchNorm state."""
    for k, layer in enumerate(net.layers):
        if layer.activation not in ACTIVATIONS:
            raise ConfigError(f"layer {k}: unknown activation {layer.activation!r}")
        if layer.bias.shape != (layer.out_dim,):
            raise ShapeError(f"layer {k}: bias shape {layer.bias.shape}")
        if k > 0 and layer.in_dim != net.layers[k - 1].out_dim:
            raise ShapeError(
                f"layer {k}: input dim {layer.in_dim} != previous output "
                f"{net.layers[k - 1].out_dim}"
            )
        bn = layer.batchnorm
        if bn is not None:
            for arr in (bn.scale, bn.shift, bn.running_mean, bn.running_var):
                if arr.shape != (layer.out_dim,):
                    raise ShapeError(f"layer {k}: batchnorm shape {arr.shape}")
            if not np.all(bn.running_var > 0):
                raise ConfigError(f"layer {k}: running variance must stay positive")


def dense_layer(
    rng: np.random.Generator,
    in_dim: int,
    out_dim: int,
    activation: str = "identity",
    batchnorm: bool = False,
) -> Layer:
    """Xavier-uniform initialized layer (suits the tanh nets used here)."""
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    bias = np.zeros(out_dim)
    bn = None
    if batchnorm:
        bn = BatchNorm(
            scale=np.ones(out_dim),
            shift=np.zeros(out_dim),
            running_mean=np.zeros(out_dim),
            running_var=np.ones(out_dim),
        )
    return Layer(weight, bias, activation, bn)


def build_mlp(
    rng: np.random.Generator,
    dims: list[int],
    hidden_activation: str = "tanh",
    out_activation: str = "identity",
    batchnorm: bool = True,
    batchnorm_out: bool = False,
) -> DenseNet:
    """Stack dense layers for the given dimension chain."""
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    layers = []
    for k in range(len(dims) - 1):
        last = k == len(dims) - 2
        layers.append(
            dense_layer(
                rng,
                dims[k],
                dims[k + 1],
                out_activation if last else hidden_activation,
                batchnorm=batchnorm_out if last else batchnorm,
            )
        )
    return DenseNet(layers)


def compose(*nets: DenseNet) -> DenseNet:
    """Chain nets into one (layers share the underlying parameter arrays)."""
    layers = []
    for net in nets:
        layers.extend(net.layers)
    out = DenseNet(layers)
    validate(out)
    return out


def forward(net: DenseNet, x, mode: str = "infer"):
    """Evaluate the network on a vector or a batch (rows are samples).

    Inference mode is pure and uses BatchNorm running statistics.  Train
    mode requires a batch of at least 2 rows, uses batch statistics,
    updates the running statistics, and stores the cache that backprop
    consumes.
    """
    if mode not in ("infer", "train"):
        raise ConfigError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        if mode == "train":
            raise StateError("train-mode forward needs a batch of rows")
        xb = x[None, :]
    elif x.ndim == 2:
        xb = x
    else:
        raise ShapeError(f"expected 1-D or 2-D input, got shape {x.shape}")
    if net.layers and xb.shape[1] != net.in_dim:
        raise ShapeError(f"input dim {xb.shape[1]} != network input {net.in_dim}")
    if mode == "train" and xb.shape[0] < 2:
        raise StateError("train-mode forward needs at least 2 rows for BatchNorm")

    cache = []
    a = xb
    for layer in net.layers:
        u = a @ layer.weight.T + layer.bias
        bn = layer.batchnorm
        bn_cache = None
        if bn is not None:
            if mode == "train":
                mean = u.mean(axis=0)
                var = u.var(axis=0)
                bn.running_mean += bn.momentum * (mean - bn.running_mean)
                bn.running_var += bn.momentum * (var - bn.running_var)
            else:
                mean = bn.running_mean
                var = bn.running_var
            inv_std = 1.0 / np.sqrt(var + bn.eps)
            u_hat = (u - mean) * inv_std
            v = u_hat * bn.scale + bn.shift
            bn_cache = (u_hat, inv_std)
        else:
            v = u
        out = activation(layer.activation, v)
        cache.append({"a_in": a, "v": v, "bn": bn_cache})
        a = out
    if mode == "train":
        net._cache = cache
    return a[0] if single else a


def backprop(net: DenseNet, upstream, l2: float = 0.0):
    """Parameter gradients for the last train-mode forward batch.

    ``upstream`` is the gradient of the scalar batch loss with respect to
    the network output, shaped like that output.  An L2 penalty
    ``l2 * ||theta||^2`` contributes ``2 * l2 * theta`` to every trainable
    parameter.  Returns (grads dict, gradient w.r.t. the input batch).
    """
    if net._cache is None:
        raise StateError("backprop called before a train-mode forward")
    cache = net._cache
    grad_out = np.asarray(upstream, dtype=np.float64)
    if net.layers and grad_out.shape != (cache[-1]["a_in"].shape[0], net.out_dim):
        raise ShapeError(
            f"upstream shape {grad_out.shape} != batch output "
            f"({cache[-1]['a_in'].shape[0]}, {net.out_dim})"
        )
    grads: dict[str, np.ndarray] = {}
    d_a = grad_out
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        entry = cache[k]
        d_v = d_a * activation_deriv(layer.activation, entry["v"])
        bn = layer.batchnorm
        if bn is not None:
            u_hat, inv_std = entry["bn"]
            grads[f"layers.{k}.bn_scale"] = (d_v * u_hat).sum(axis=0)
            grads[f"layers.{k}.bn_shift"] = d_v.sum(axis=0)
            d_hat = d_v * bn.scale
            b = d_hat.shape[0]
            d_u = (
                inv_std
                / b
                * (
                    b * d_hat
                    - d_hat.sum(axis=0)
                    - u_hat * (d_hat * u_hat).sum(axis=0)
                )
            )
        else:
            d_u = d_v
        grads[f"layers.{k}.weight"] = d_u.T @ entry["a_in"]
        grads[f"layers.{k}.bias"] = d_u.sum(axis=0)
        d_a = d_u @ layer.weight
    if l2:
        params = net_params(net)
        for name in grads:
            grads[name] = grads[name] + 2.0 * l2 * params[name]
    return grads, d_a


def net_params(net: DenseNet) -> dict[str, np.ndarray]:
    """Trainable parameter arrays by name (references, not copies)."""
    params: dict[str, np.ndarray] = {}
    for k, layer in enumerate(net.layers):
        params[f"layers.{k}.weight"] = layer.weight
        params[f"layers.{k}.bias"] = layer.bias
        if layer.batchnorm is not None:
            params[f"layers.{k}.bn_scale"] = layer.batchnorm.scale
            params[f"layers.{k}.bn_shift"] = layer.batchnorm.shift
    return params


def jacobian(net: DenseNet, x) -> np.ndarray:
    """Exact (out x in) Jacobian at x, inference mode.

    Forward accumulation of per-layer derivative matrices; BatchNorm
    contributes its running-statistics affine derivative.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"jacobian expects a single vector, got shape {x.shape}")
    if net.layers and x.shape[0] != net.in_dim:
        raise ShapeError(f"input dim {x.shape[0]} != network input {net.in_dim}")
    jac = np.eye(x.shape[0])
    a = x
    for layer in net.layers:
        v = layer.weight @ a + layer.bias
        jac = layer.weight @ jac
        bn = layer.batchnorm
        if bn is not None:
            gain = bn.scale / np.sqrt(bn.running_var + bn.eps)
            v = gain * (v - bn.running_mean) + bn.shift
            jac = gain[:, None] * jac
        jac = activation_deriv(layer.activation, v)[:, None] * jac
        a = activation(layer.activation, v)
    return jac


@dataclass
class OptimizerState:
    """Adam / RMSprop state with per-parameter moment accumulators."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.99
    eps: float = 1e-8
    l2: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def make_optimizer(kind: str, lr: float, **hyper) -> OptimizerState:
    if kind not in ("adam", "rmsprop"):
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    return OptimizerState(kind=kind, lr=lr, **hyper)


def optimizer_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Apply one optimizer update in place and return the params."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != param {p.shape}")
        if state.l2:
            g = g + 2.0 * state.l2 * p
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        if state.kind == "adam":
            m = state.first_moment.setdefault(name, np.zeros_like(p))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            v *= state.decay
            v += (1.0 - state.decay) * g * g
            p -= state.lr * g / (np.sqrt(v) + state.eps)
    return params


def net_manifest(net: DenseNet, prefix: str = "") -> tuple[list[dict], dict]:
    """Split a net into a JSON-able layer spec and named parameter arrays."""
    spec = []
    arrays: dict[str, np.ndarray] = {}
    for k, layer in enumerate(net.layers):
        bn = layer.batchnorm
        spec.append(
            {
                "in": layer.in_dim,
                "out": layer.out_dim,
                "activation": layer.activation,
                "batchnorm": bn is not None,
                "bn_eps": bn.eps if bn else None,
                "bn_momentum": bn.momentum if bn else None,
            }
        )
        base = f"{prefix}layers.{k}."
        arrays[base + "weight"] = layer.weight
        arrays[base + "bias"] = layer.bias
        if bn is not None:
            arrays[base + "bn_scale"] = bn.scale
            arrays[base + "bn_shift"] = bn.shift
            arrays[base + "bn_running_mean"] = bn.running_mean
            arrays[base + "bn_running_var"] = bn.running_var
    return spec, arrays


def net_from_manifest(spec: list[dict], arrays: dict, prefix: str = "") -> DenseNet:
    layers = []
    for k, entry in enumerate(spec):
        base = f"{prefix}layers.{k}."
        bn = None
        if entry["batchnorm"]:
            bn = BatchNorm(
                scale=arrays[base + "bn_scale"],
                shift=arrays[base + "bn_shift"],
                running_mean=arrays[base + "bn_running_mean"],
                running_var=arrays[base + "bn_running_var"],
                eps=entry["bn_eps"],
                momentum=entry["bn_momentum"],
            )
        layers.append(
            Layer(
                weight=arrays[base + "weight"],
                bias=arrays[base + "bias"],
                activation=entry["activation"],
                batchnorm=bn,
            )
        )
    net = DenseNet(layers)
    validate(net)
    return net
