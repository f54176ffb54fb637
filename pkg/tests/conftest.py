"""Shared fixtures: a tiny two-blob tabular problem for fast unit tests
and a fully trained synthetic-surface bundle reused by the geometry,
counterfactual and acceptance suites."""

from dataclasses import replace

import numpy as np
import pytest

from riemce import models, nn, pipeline
from riemce.config import default_config


def make_blobs(n=600, dim=2, seed=0, separation=2.0, scale=0.35):
    """Two separable Gaussian blobs in [0, 1]^dim after normalization."""
    rng = nn.make_rng(seed)
    half = n // 2
    a = rng.normal(0.0, scale, size=(half, dim))
    b = rng.normal(separation, scale, size=(n - half, dim))
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    order = rng.permutation(n)
    x, y = x[order], y[order]
    lo, hi = x.min(axis=0), x.max(axis=0)
    return (x - lo) / (hi - lo), y


@pytest.fixture(scope="session")
def blob_data():
    return make_blobs()


@pytest.fixture(scope="session")
def blob_classifier(blob_data):
    x, y = blob_data
    cfg = models.ClassifierConfig(
        rep_dim=8, lr=1e-2, l2=1e-4, epochs=30, batch_size=128, seed=11
    )
    clf, _ = models.train_classifier(x, y, cfg)
    return clf


@pytest.fixture(scope="session")
def toy_vae(blob_data):
    """Small trained VAE (2 -> 1 latent) with fitted decoder variance."""
    x, _ = blob_data
    vcfg = models.VaeConfig(
        latent_dim=1,
        hidden_dims=(16, 16),
        epochs=60,
        lr=1e-2,
        batch_size=128,
        seed=5,
    )
    vae, _ = models.train_vae_warmup(x, vcfg)
    rcfg = models.RbfConfig(
        centers=24,
        bandwidth=0.6,
        bandwidth_mode="scaled",
        epochs=120,
        lr=1e-2,
        batch_size=128,
        seed=6,
    )
    vae, _ = models.fit_decoder_variance(vae, x, rcfg)
    return vae


def surface_config(seed=0):
    cfg = default_config("surface")
    return replace(
        cfg,
        seed=seed,
        surface_samples=6000,
        surface_hole_radius=1.5,
        vae_hidden=(64, 64),
        vae_epochs=100,
        clf_epochs=30,
        rbf_centers=100,
        rbf_bandwidth=0.4,
    )


@pytest.fixture(scope="session")
def surface_bundle():
    """Trained surface models shared across suites (seeded, ~15 s)."""
    cfg = surface_config()
    train, test = pipeline.build_dataset(cfg)
    clf, _ = models.train_classifier(
        train.x, train.y, pipeline.classifier_config(cfg), test.x, test.y
    )
    vae, warm_history = models.train_vae_warmup(train.x, pipeline.vae_config(cfg))
    vae, _ = models.fit_decoder_variance(vae, train.x, pipeline.rbf_config(cfg))
    codes = pipeline.train_codes(vae, train)
    return {
        "cfg": cfg,
        "train": train,
        "test": test,
        "clf": clf,
        "vae": vae,
        "codes": codes,
        "warm_history": warm_history,
    }
