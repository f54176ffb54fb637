"""Counterfactual explanations for tabular classifiers by Riemannian
gradient descent in the latent space of a variance-calibrated VAE."""

from .config import RunConfig, default_config, load_config, save_config
from .counterfactual import (
    CeConfig,
    CeTrajectory,
    ce_loss,
    extract_at_threshold,
    generate_batch,
    generate_ce,
)
from .data import (
    SyntheticSurfaceSpec,
    TabularDataset,
    generate_surface,
    load_adult,
    load_gmc,
    split,
)
from .errors import (
    ConfigError,
    NumericError,
    RiemceError,
    SchemaError,
    ShapeError,
    SingularMetricError,
    StateError,
)
from .geometry import (
    AmbientMetric,
    MetricTensor,
    ambient_metric,
    enhanced_metric,
    metric_volume,
    pullback_metric,
    riemannian_gradient,
)
from .models import (
    ClassifierConfig,
    ClassifierModel,
    RbfConfig,
    RbfVariance,
    VaeConfig,
    VaeModel,
    classify,
    decode_mean,
    decoder_sigma,
    encode,
    fit_decoder_variance,
    representation,
    train_classifier,
    train_vae_warmup,
)

__version__ = "0.1.0"
