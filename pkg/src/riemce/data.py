"""Dataset generation and ingestion.

Three sources: a synthetic noisy surface in R^3 with a hole (for the
topology demonstration), the Adult census table, and the Give Me Some
Credit table.  Loaders emit raw (log-transformed, unnormalized) tables;
`split` performs the seeded 75/25 partition and min-max normalization
with parameters computed on the training split only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from . import checkpoint, nn
from .errors import ConfigError, SchemaError


@dataclass
class FeatureSpec:
    name: str
    kind: str  # continuous | binary
    immutable: bool = False
    log_transformed: bool = False
    norm_min: float = 0.0
    norm_max: float = 1.0


@dataclass
class RawTable:
    """Unnormalized feature table; log transforms already applied."""

    name: str
    x: np.ndarray  # (N, D)
    y: np.ndarray  # (N,) in {0, 1}
    features: list[FeatureSpec]
    rejected_rows: int = 0


@dataclass
class TabularDataset:
    name: str
    role: str  # train | test
    x: np.ndarray  # (N, D), normalized to [0, 1]
    y: np.ndarray  # (N,)
    features: list[FeatureSpec]
    clamp_count: int = 0  # entries clamped into [0, 1] (test split only)

    @property
    def immutable_mask(self) -> np.ndarray:
        return np.array([f.immutable for f in self.features])

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]


@dataclass
class SyntheticSurfaceSpec:
    samples: int = 10000
    noise: float = 0.1
    hole_center: tuple[float, float] = (0.0, 0.0)
    # the literal radius reading (0.2) excises almost nothing; 1.0 gives a
    # visually meaningful hole mid-domain
    hole_radius: float = 1.0
    boundary_coefficient: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.hole_radius < 0:
            raise ConfigError("hole radius must be >= 0")
        if self.noise <= 0:
            raise ConfigError("noise scale must be positive")


def surface_label(z1, z2, coefficient: float = 2.5):
    """Sign rule on the latent plane: positive above the parabola."""
    return (np.sign(z2 - coefficient * np.asarray(z1) ** 2) + 1.0) * 0.5


def generate_surface(spec: SyntheticSurfaceSpec) -> RawTable:
    """Noisy sinusoidal sheet over a centered square with a circular hole.

    Plane coordinates are uniform on (-pi, pi)^2 (the sampling is centered
    so the hole sits mid-domain); points inside the hole are rejected
    before mapping; the third coordinate is 0.25*sin of the first; labels
    come from the clean plane coordinates.
    """
    rng = nn.make_rng(spec.seed)
    center = np.asarray(spec.hole_center, dtype=np.float64)
    kept = []
    total = 0
    while total < spec.samples:
        draw = rng.uniform(-np.pi, np.pi, size=(max(spec.samples, 1024), 2))
        outside = ((draw - center) ** 2).sum(axis=1) >= spec.hole_radius**2
        draw = draw[outside]
        kept.append(draw)
        total += draw.shape[0]
    plane = np.concatenate(kept)[: spec.samples]
    labels = surface_label(plane[:, 0], plane[:, 1], spec.boundary_coefficient)
    x = np.column_stack([plane, 0.25 * np.sin(plane[:, 0])])
    x = x + rng.normal(0.0, spec.noise, size=x.shape)
    features = [
        FeatureSpec("u", "continuous"),
        FeatureSpec("v", "continuous"),
        FeatureSpec("height", "continuous"),
    ]
    return RawTable("surface", x, labels.astype(np.int64), features)


# --- Adult ------------------------------------------------------------------

_ADULT_RAW_COLUMNS = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
]

_ADULT_ALIASES = {"educational-num": "education-num"}

# aggregation of raw categories into the seven binary features; each entry
# maps the positive value of the binary to the raw categories that trigger it
ADULT_CATEGORY_MAPS = {
    "private_workclass": ("workclass", {"Private"}),
    "not_married": (
        "marital-status",
        {"Never-married", "Divorced", "Separated", "Widowed"},
    ),
    "occupation_other": (
        "occupation",
        None,  # complement set: everything except the specialist occupations
    ),
    "not_husband": ("relationship", None),  # complement of {"Husband"}
    "race_white": ("race", {"White"}),
    "sex_male": ("sex", {"Male"}),
    "native_us": ("native-country", {"United-States"}),
}

_ADULT_SPECIALIST_OCCUPATIONS = {"Exec-managerial", "Prof-specialty"}


def _read_adult_frame(path) -> pd.DataFrame:
    frame = pd.read_csv(path, skipinitialspace=True, na_values=["", "NA"])
    normalized = {c: str(c).strip().lower().replace("_", "-").replace(".", "-") for c in frame.columns}
    frame = frame.rename(columns=normalized)
    frame = frame.rename(columns=_ADULT_ALIASES)
    missing = [c for c in _ADULT_RAW_COLUMNS if c not in frame.columns]
    if missing and frame.shape[1] == len(_ADULT_RAW_COLUMNS):
        # headerless classic layout: same width, no recognizable names
        frame = pd.read_csv(
            path,
            header=None,
            names=_ADULT_RAW_COLUMNS,
            skipinitialspace=True,
            na_values=["", "NA"],
        )
        missing = []
    if missing:
        raise SchemaError(f"adult table missing columns: {missing}")
    return frame


def load_adult(path) -> RawTable:
    """Adult census table -> 13 features (7 binary aggregates, 6 continuous).

    Categorical features are collapsed to binary aggregates (private
    industry, not married, "other" occupation, not a husband, white, male,
    USA native); capital gain/loss are log1p-transformed; '?' entries fall
    into the negative aggregate of each binary.  Rows with missing values
    in used columns are rejected and counted.  sex, race and age are
    immutable.
    """
    frame = _read_adult_frame(path)
    used = [c for c in _ADULT_RAW_COLUMNS if c != "education"]
    before = len(frame)
    frame = frame.dropna(subset=used)
    rejected = before - len(frame)
    for col in (
        "workclass",
        "marital-status",
        "occupation",
        "relationship",
        "race",
        "sex",
        "native-country",
        "income",
    ):
        frame[col] = frame[col].astype(str).str.strip()

    cols = {}
    for name, (raw_col, positive) in ADULT_CATEGORY_MAPS.items():
        if name == "occupation_other":
            values = (~frame[raw_col].isin(_ADULT_SPECIALIST_OCCUPATIONS)).astype(float)
        elif name == "not_husband":
            values = (frame[raw_col] != "Husband").astype(float)
        else:
            values = frame[raw_col].isin(positive).astype(float)
        cols[name] = values.to_numpy()

    continuous = {
        "age": frame["age"].to_numpy(dtype=np.float64),
        "final_weight": frame["fnlwgt"].to_numpy(dtype=np.float64),
        "education_years": frame["education-num"].to_numpy(dtype=np.float64),
        "work_hours": frame["hours-per-week"].to_numpy(dtype=np.float64),
        "capital_gain": np.log1p(frame["capital-gain"].to_numpy(dtype=np.float64)),
        "capital_loss": np.log1p(frame["capital-loss"].to_numpy(dtype=np.float64)),
    }

    features = [
        FeatureSpec("private_workclass", "binary"),
        FeatureSpec("not_married", "binary"),
        FeatureSpec("occupation_other", "binary"),
        FeatureSpec("not_husband", "binary"),
        FeatureSpec("race_white", "binary", immutable=True),
        FeatureSpec("sex_male", "binary", immutable=True),
        FeatureSpec("native_us", "binary"),
        FeatureSpec("age", "continuous", immutable=True),
        FeatureSpec("final_weight", "continuous"),
        FeatureSpec("education_years", "continuous"),
        FeatureSpec("work_hours", "continuous"),
        FeatureSpec("capital_gain", "continuous", log_transformed=True),
        FeatureSpec("capital_loss", "continuous", log_transformed=True),
    ]
    merged = {**cols, **continuous}
    x = np.column_stack([merged[f.name] for f in features])
    y = frame["income"].str.contains(">50K").to_numpy().astype(np.int64)
    return RawTable("adult", x, y, features, rejected_rows=rejected)


# --- Give Me Some Credit ------------------------------------------------------

_GMC_COLUMNS = [
    "RevolvingUtilizationOfUnsecuredLines",
    "age",
    "NumberOfTime30-59DaysPastDueNotWorse",
    "DebtRatio",
    "MonthlyIncome",
    "NumberOfOpenCreditLinesAndLoans",
    "NumberOfTimes90DaysLate",
    "NumberRealEstateLoansOrLines",
    "NumberOfTime60-89DaysPastDueNotWorse",
    "NumberOfDependents",
]

_GMC_LABEL = "SeriousDlqin2yrs"


def load_gmc(path, positive_is_no_distress: bool = True) -> RawTable:
    """Give Me Some Credit table -> 10 continuous features.

    Rows with missing values are dropped and counted; debt ratio is
    log1p-transformed; age is immutable.  With the default label
    convention the positive class is the ~93%-prevalence one (no recorded
    distress), so counterfactuals move delinquent applicants toward it;
    pass False to flip the convention.
    """
    frame = pd.read_csv(path)
    frame = frame.loc[:, ~frame.columns.str.startswith("Unnamed")]
    missing = [c for c in _GMC_COLUMNS + [_GMC_LABEL] if c not in frame.columns]
    if missing:
        raise SchemaError(f"gmc table missing columns: {missing}")
    before = len(frame)
    frame = frame.dropna(subset=_GMC_COLUMNS + [_GMC_LABEL])
    rejected = before - len(frame)

    features = []
    cols = []
    for col in _GMC_COLUMNS:
        values = frame[col].to_numpy(dtype=np.float64)
        log_transformed = col == "DebtRatio"
        if log_transformed:
            values = np.log1p(values)
        features.append(
            FeatureSpec(
                col,
                "continuous",
                immutable=(col == "age"),
                log_transformed=log_transformed,
            )
        )
        cols.append(values)
    distress = frame[_GMC_LABEL].to_numpy(dtype=np.int64)
    y = 1 - distress if positive_is_no_distress else distress
    return RawTable("gmc", np.column_stack(cols), y, features, rejected_rows=rejected)


# --- split + normalization ----------------------------------------------------


def normalize_matrix(x: np.ndarray, features: list[FeatureSpec]) -> np.ndarray:
    """Apply stored min-max parameters; constant features map to 0."""
    mins = np.array([f.norm_min for f in features])
    maxs = np.array([f.norm_max for f in features])
    span = np.where(maxs > mins, maxs - mins, 1.0)
    return (x - mins) / span


def split(
    raw: RawTable, seed: int, train_fraction: float = 0.75
) -> tuple[TabularDataset, TabularDataset]:
    """Seeded disjoint 75/25 split with train-only normalization.

    Test values outside the train range are clamped into [0, 1] and the
    number of clamped entries is recorded on the test dataset.
    """
    n = raw.x.shape[0]
    if n < 4:
        raise ConfigError("need at least 4 rows to split")
    rng = nn.make_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train_idx, test_idx = order[:n_train], order[n_train:]

    features = [
        replace(
            f,
            norm_min=float(raw.x[train_idx, j].min()),
            norm_max=float(raw.x[train_idx, j].max()),
        )
        for j, f in enumerate(raw.features)
    ]
    train_x = normalize_matrix(raw.x[train_idx], features)
    test_x = normalize_matrix(raw.x[test_idx], features)
    clamped = int(np.sum((test_x < 0.0) | (test_x > 1.0)))
    test_x = np.clip(test_x, 0.0, 1.0)

    train = TabularDataset(raw.name, "train", train_x, raw.y[train_idx], features)
    test = TabularDataset(
        raw.name, "test", test_x, raw.y[test_idx], features, clamp_count=clamped
    )
    return train, test


# --- canonical dataset file ---------------------------------------------------


def save_dataset_pair(path, train: TabularDataset, test: TabularDataset) -> None:
    meta = {
        "name": train.name,
        "clamp_count": test.clamp_count,
        "features": [
            {
                "name": f.name,
                "kind": f.kind,
                "immutable": f.immutable,
                "log_transformed": f.log_transformed,
                "norm_min": f.norm_min,
                "norm_max": f.norm_max,
            }
            for f in train.features
        ],
    }
    arrays = {
        "train_x": train.x,
        "train_y": train.y.astype(np.float64),
        "test_x": test.x,
        "test_y": test.y.astype(np.float64),
    }
    checkpoint.save_blob(path, "dataset", meta, arrays)


def load_dataset_pair(path) -> tuple[TabularDataset, TabularDataset]:
    kind, meta, arrays = checkpoint.load_blob(path)
    if kind != "dataset":
        raise ConfigError(f"{path}: expected dataset checkpoint, got {kind!r}")
    features = [FeatureSpec(**entry) for entry in meta["features"]]
    train = TabularDataset(
        meta["name"],
        "train",
        arrays["train_x"],
        arrays["train_y"].astype(np.int64),
        features,
    )
    test = TabularDataset(
        meta["name"],
        "test",
        arrays["test_x"],
        arrays["test_y"].astype(np.int64),
        features,
        clamp_count=int(meta["clamp_count"]),
    )
    return train, test
