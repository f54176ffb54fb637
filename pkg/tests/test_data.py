import os
from pathlib import Path

import numpy as np
import pytest

from riemce import data
from riemce.errors import ConfigError, SchemaError

FIXTURES = Path(__file__).parent / "fixtures"

ADULT_CSV = os.environ.get("RIEMCE_ADULT_CSV")
GMC_CSV = os.environ.get("RIEMCE_GMC_CSV")


def label_area_fraction(hole_radius, coefficient=2.5, grid=2001):
    """Numeric area integral of the sign rule over the sampling domain."""
    ticks = np.linspace(-np.pi, np.pi, grid)
    u, v = np.meshgrid(ticks, ticks)
    outside = u**2 + v**2 >= hole_radius**2
    positive = v > coefficient * u**2
    return (positive & outside).sum() / outside.sum()


class TestSurface:
    def test_clean_mapping_of_known_point(self):
        # noise-free mapping: third coordinate is 0.25*sin(first)
        spec = data.SyntheticSurfaceSpec(samples=1, noise=1e-12, hole_radius=0.0, seed=0)
        plane = np.array([np.pi / 2, np.pi - 0.3])
        mapped = np.array([plane[0], plane[1], 0.25 * np.sin(plane[0])])
        raw = data.generate_surface(spec)
        # the generator adds negligible noise here; check the functional form instead
        np.testing.assert_allclose(
            raw.x[0, 2], 0.25 * np.sin(raw.x[0, 0]), atol=1e-2
        )
        np.testing.assert_allclose(mapped[2], 0.25, rtol=1e-12)

    def test_sign_rule(self):
        assert data.surface_label(0.1, 2.0) == 1.0  # 2 - 2.5*0.01 > 0
        assert data.surface_label(1.0, 2.0) == 0.0
        np.testing.assert_array_equal(
            data.surface_label(np.array([0.1, 1.0]), np.array([2.0, 2.0])), [1.0, 0.0]
        )

    def test_hole_is_empty_and_prevalence_matches_area_integral(self):
        spec = data.SyntheticSurfaceSpec(samples=10000, hole_radius=1.0, seed=3)
        raw = data.generate_surface(spec)
        assert raw.x.shape == (10000, 3)
        # plane coordinates carry noise; labels come from the clean draw,
        # so check prevalence against the exact area fraction
        prevalence = raw.y.mean()
        expected = label_area_fraction(spec.hole_radius)
        assert abs(prevalence - expected) <= 0.02
        # clean plane points (recovered up to noise) avoid the hole
        radius = np.hypot(raw.x[:, 0], raw.x[:, 1])
        assert (radius < spec.hole_radius - 3 * 0.1).sum() == 0

    def test_noise_scale_recovery(self):
        spec = data.SyntheticSurfaceSpec(samples=20000, hole_radius=0.5, seed=4)
        raw = data.generate_surface(spec)
        resid = raw.x[:, 2] - 0.25 * np.sin(raw.x[:, 0])
        # residual mixes height noise with the sine slope against first-axis
        # noise; it must sit within 10% of the configured scale inflated by
        # that slope term
        slope = 0.25 * np.cos(raw.x[:, 0])
        expected = np.sqrt(spec.noise**2 * (1 + np.mean(slope**2)))
        assert abs(resid.std() - expected) / expected <= 0.1

    def test_determinism(self):
        spec = data.SyntheticSurfaceSpec(samples=500, seed=9)
        a = data.generate_surface(spec)
        b = data.generate_surface(spec)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)


class TestSplit:
    def _raw(self, n=100, seed=0):
        rng = np.random.default_rng(seed)
        features = [
            data.FeatureSpec("a", "continuous"),
            data.FeatureSpec("b", "continuous", immutable=True),
        ]
        return data.RawTable("toy", rng.normal(size=(n, 2)), rng.integers(0, 2, n), features)

    def test_exact_proportions(self):
        train, test = data.split(self._raw(100), seed=1)
        assert train.x.shape[0] == 75 and test.x.shape[0] == 25

    def test_same_seed_same_split(self):
        raw = self._raw(80)
        a_train, a_test = data.split(raw, seed=5)
        b_train, b_test = data.split(raw, seed=5)
        np.testing.assert_array_equal(a_train.x, b_train.x)
        np.testing.assert_array_equal(a_test.y, b_test.y)

    def test_train_normalized_to_unit_interval(self):
        train, test = data.split(self._raw(200), seed=2)
        assert train.x.min() == 0.0 and train.x.max() == 1.0
        assert test.x.min() >= 0.0 and test.x.max() <= 1.0

    def test_test_outliers_clamped_and_counted(self):
        raw = self._raw(200, seed=3)
        train, test = data.split(raw, seed=3)
        # params come from train only, so some test rows typically clip
        assert test.clamp_count >= 0
        mins = np.array([f.norm_min for f in train.features])
        raw_test_extremes = raw.x.min(axis=0) < mins
        if raw_test_extremes.any():
            assert test.clamp_count > 0

    def test_no_leakage_from_test_split(self):
        raw = self._raw(120, seed=4)
        train, test = data.split(raw, seed=4)
        # recomputing params on the test rows gives different values
        test_mins = test.x.min(axis=0)
        assert not np.allclose(test_mins, 0.0)

    def test_normalization_idempotence(self):
        train, _ = data.split(self._raw(100, seed=6), seed=6)
        refit = [
            data.FeatureSpec(
                f.name, f.kind, norm_min=float(train.x[:, j].min()),
                norm_max=float(train.x[:, j].max()),
            )
            for j, f in enumerate(train.features)
        ]
        again = data.normalize_matrix(train.x, refit)
        np.testing.assert_allclose(again, train.x, atol=1e-15)

    def test_too_small_dataset(self):
        with pytest.raises(ConfigError):
            data.split(self._raw(3), seed=0)

    def test_immutable_mask_tracks_names_not_positions(self):
        raw = self._raw(50)
        reordered = data.RawTable(
            raw.name, raw.x[:, ::-1].copy(), raw.y, list(reversed(raw.features))
        )
        train, _ = data.split(reordered, seed=0)
        assert train.feature_names == ["b", "a"]
        np.testing.assert_array_equal(train.immutable_mask, [True, False])


class TestAdultLoader:
    def test_fixture_schema_and_encoding(self):
        raw = data.load_adult(FIXTURES / "adult_sample.csv")
        assert raw.x.shape == (16, 13)
        assert [f.name for f in raw.features[:7]] == [
            "private_workclass",
            "not_married",
            "occupation_other",
            "not_husband",
            "race_white",
            "sex_male",
            "native_us",
        ]
        names = [f.name for f in raw.features]
        # row 0: State-gov, never-married clerk, white male from the US
        row = dict(zip(names, raw.x[0]))
        assert row["private_workclass"] == 0.0
        assert row["not_married"] == 1.0
        assert row["occupation_other"] == 1.0
        assert row["not_husband"] == 1.0
        assert row["race_white"] == 1.0 and row["sex_male"] == 1.0
        assert row["native_us"] == 1.0
        np.testing.assert_allclose(row["capital_gain"], np.log1p(2174.0))
        # row 4: female -> sex_male 0; Cuba -> native_us 0; Prof-specialty -> other 0
        row4 = dict(zip(names, raw.x[4]))
        assert row4["sex_male"] == 0.0
        assert row4["native_us"] == 0.0
        assert row4["occupation_other"] == 0.0
        assert row4["not_husband"] == 1.0  # Wife
        # labels: >50K rows
        np.testing.assert_array_equal(
            raw.y, [0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 0]
        )

    def test_zero_capital_gain_maps_to_zero(self):
        raw = data.load_adult(FIXTURES / "adult_sample.csv")
        gain = raw.x[:, [f.name for f in raw.features].index("capital_gain")]
        assert gain[1] == 0.0  # log1p(0) == 0

    def test_question_marks_fold_into_negative_aggregates(self):
        raw = data.load_adult(FIXTURES / "adult_sample.csv")
        names = [f.name for f in raw.features]
        row = dict(zip(names, raw.x[11]))  # workclass '?', occupation '?'
        assert row["private_workclass"] == 0.0
        assert row["occupation_other"] == 1.0
        assert raw.rejected_rows == 0

    def test_immutables(self):
        raw = data.load_adult(FIXTURES / "adult_sample.csv")
        immutable = {f.name for f in raw.features if f.immutable}
        assert immutable == {"sex_male", "race_white", "age"}

    def test_missing_column_is_schema_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("age,workclass\n39,Private\n")
        with pytest.raises(SchemaError):
            data.load_adult(bad)

    @pytest.mark.skipif(ADULT_CSV is None, reason="set RIEMCE_ADULT_CSV to run")
    def test_real_prevalence(self):
        raw = data.load_adult(ADULT_CSV)
        assert raw.x.shape[1] == 13
        assert abs(raw.y.mean() - 0.24) <= 0.02


class TestGmcLoader:
    def test_fixture_schema(self):
        raw = data.load_gmc(FIXTURES / "gmc_sample.csv")
        assert raw.x.shape == (11, 10)  # two rows have missing fields
        assert raw.rejected_rows == 2
        assert [f.name for f in raw.features if f.immutable] == ["age"]
        debt = raw.x[:, [f.name for f in raw.features].index("DebtRatio")]
        np.testing.assert_allclose(debt[0], np.log1p(0.802982129))

    def test_label_convention_follows_prevalence_reading(self):
        raw = data.load_gmc(FIXTURES / "gmc_sample.csv")
        # positive class = no recorded distress (the ~93% one)
        assert raw.y.mean() > 0.5
        flipped = data.load_gmc(FIXTURES / "gmc_sample.csv", positive_is_no_distress=False)
        np.testing.assert_array_equal(raw.y, 1 - flipped.y)

    def test_missing_column_is_schema_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("SeriousDlqin2yrs,age\n0,30\n")
        with pytest.raises(SchemaError):
            data.load_gmc(bad)

    @pytest.mark.skipif(GMC_CSV is None, reason="set RIEMCE_GMC_CSV to run")
    def test_real_sample_count(self):
        raw = data.load_gmc(GMC_CSV)
        assert raw.x.shape[1] == 10
        assert abs(raw.x.shape[0] - 116_000) <= 5_000


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        spec = data.SyntheticSurfaceSpec(samples=200, seed=1)
        train, test = data.split(data.generate_surface(spec), seed=2)
        path = tmp_path / "dataset.ckpt"
        data.save_dataset_pair(path, train, test)
        train2, test2 = data.load_dataset_pair(path)
        np.testing.assert_array_equal(train.x, train2.x)
        np.testing.assert_array_equal(test.y, test2.y)
        assert [f.name for f in train2.features] == [f.name for f in train.features]
        assert train2.features[0].norm_min == train.features[0].norm_min
        assert test2.clamp_count == test.clamp_count
