import numpy as np
import pytest

from riemce import counterfactual as cf
from riemce import geometry, models, nn, pipeline
from riemce.errors import ConfigError

from test_geometry import identity_classifier


def below_hole_factuals(bundle, count=12):
    test = bundle["test"]
    clf = bundle["clf"]
    factuals, _, _ = pipeline.select_factuals(clf, test, target=1)
    mins = np.array([f.norm_min for f in test.features[:2]])
    maxs = np.array([f.norm_max for f in test.features[:2]])
    plane = factuals[:, :2] * (maxs - mins) + mins
    chosen = (plane[:, 1] < -1.5) & (np.abs(plane[:, 0]) < 1.2)
    return factuals[chosen][:count]


class TestCeConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            cf.CeConfig(optimizer="nag")
        with pytest.raises(ConfigError):
            cf.CeConfig(eta=0.0)
        with pytest.raises(ConfigError):
            cf.CeConfig(iterations=0)
        with pytest.raises(ConfigError):
            cf.CeConfig(alpha=-0.1)


class TestCeLoss:
    def test_bce_at_one_half(self, toy_vae):
        clf = identity_classifier(toy_vae.ambient_dim)
        clf = models.ClassifierModel(
            clf.representation_net, np.zeros(toy_vae.ambient_dim), 0.0
        )
        loss, grad = cf.ce_loss(toy_vae, clf, np.zeros(1), np.zeros(2), 1, 0.0)
        np.testing.assert_allclose(loss, np.log(2.0), rtol=1e-12)
        np.testing.assert_array_equal(grad, np.zeros(1))

    def test_fidelity_zero_at_cusp(self, toy_vae, blob_classifier):
        z = np.array([0.3])
        x_factual = models.decode_mean(toy_vae, z)
        loss_without, grad_without = cf.ce_loss(
            toy_vae, blob_classifier, z, x_factual, 1, 0.0
        )
        loss_with, grad_with = cf.ce_loss(
            toy_vae, blob_classifier, z, x_factual, 1, 0.5
        )
        assert loss_with == loss_without  # distance term is exactly zero
        np.testing.assert_array_equal(grad_with, grad_without)

    @pytest.mark.parametrize("alpha", [0.0, 0.1])
    def test_gradient_matches_finite_differences(self, toy_vae, blob_classifier, alpha):
        rng = nn.make_rng(13)
        step = 1e-5
        checked = 0
        for _ in range(20):
            z = rng.uniform(-1.5, 1.5, size=1)
            x_factual = rng.uniform(size=2)
            _, grad = cf.ce_loss(toy_vae, blob_classifier, z, x_factual, 1, alpha)
            grad_fd = np.zeros_like(grad)
            for i in range(z.size):
                offset = np.zeros_like(z)
                offset[i] = step
                up, _ = cf.ce_loss(toy_vae, blob_classifier, z + offset, x_factual, 1, alpha)
                down, _ = cf.ce_loss(toy_vae, blob_classifier, z - offset, x_factual, 1, alpha)
                grad_fd[i] = (up - down) / (2.0 * step)
            if np.abs(grad_fd).max() < 1e-4:
                continue  # flat spot: central differences are all roundoff
            rel = np.abs(grad - grad_fd) / np.abs(grad_fd).max()
            assert rel.max() <= 1e-4
            checked += 1
        assert checked >= 10

    def test_gradient_sweep_over_hundred_model_point_pairs(self):
        # 10 random toy model pairs x 10 latent points each
        step = 1e-5
        checked = 0
        for model_seed in range(10):
            rng = nn.make_rng(700 + model_seed)
            decoder = nn.build_mlp(rng, [2, 10, 4], out_activation="sigmoid",
                                   batchnorm=False)
            rep = nn.build_mlp(rng, [4, 8, 5], out_activation="tanh", batchnorm=False)
            clf = models.ClassifierModel(rep, rng.normal(size=5), 0.1)
            variance = models.RbfVariance(
                centers=rng.normal(size=(6, 2)),
                weights=rng.uniform(0.5, 5.0, size=(4, 6)),
                bandwidth=0.9,
                floor=1e-6,
            )
            vae = models.VaeModel(
                encoder_trunk=nn.DenseNet([]),
                encoder_mean_head=nn.DenseNet([nn.dense_layer(rng, 4, 2)]),
                encoder_var_head=None,
                decoder_mean_net=decoder,
                variance=variance,
                latent_dim=2,
                ambient_dim=4,
            )
            for _ in range(10):
                z = rng.uniform(-1.0, 1.0, size=2)
                x_factual = rng.uniform(size=4)
                _, grad = cf.ce_loss(vae, clf, z, x_factual, 1, 0.1)
                grad_fd = np.zeros_like(grad)
                for i in range(2):
                    offset = np.zeros(2)
                    offset[i] = step
                    up, _ = cf.ce_loss(vae, clf, z + offset, x_factual, 1, 0.1)
                    down, _ = cf.ce_loss(vae, clf, z - offset, x_factual, 1, 0.1)
                    grad_fd[i] = (up - down) / (2.0 * step)
                if np.abs(grad_fd).max() < 1e-4:
                    continue
                rel = np.abs(grad - grad_fd) / np.abs(grad_fd).max()
                assert rel.max() <= 1e-4, (model_seed, z)
                checked += 1
        assert checked >= 90  # out of the 100 sampled pairs


class TestGenerateCe:
    def test_step_count_and_length(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factual = below_hole_factuals(surface_bundle, 1)[0]
        for optimizer in ("sgd", "rsgd", "rsgd_c"):
            config = cf.CeConfig(optimizer=optimizer, iterations=25)
            traj = cf.generate_ce(vae, clf, factual, config)
            assert traj.valid and not traj.stalled
            assert len(traj.steps) == config.iterations + 1
            zs = np.stack([s.z for s in traj.steps])
            lengths = np.linalg.norm(np.diff(zs, axis=0), axis=1)
            np.testing.assert_allclose(lengths, config.eta, atol=1e-12, rtol=0)

    def test_decoded_points_inside_unit_cube(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factual = below_hole_factuals(surface_bundle, 1)[0]
        traj = cf.generate_ce(vae, clf, factual, cf.CeConfig(optimizer="rsgd", iterations=30))
        for step in traj.steps:
            assert np.all(step.x_hat > 0) and np.all(step.x_hat < 1)

    def test_identity_metric_reduces_rsgd_to_sgd(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factuals = below_hole_factuals(surface_bundle, 5)
        for factual in factuals:
            sgd = cf.generate_ce(vae, clf, factual, cf.CeConfig(optimizer="sgd", iterations=40))
            rsgd = cf.generate_ce(
                vae,
                clf,
                factual,
                cf.CeConfig(optimizer="rsgd", iterations=40),
                metric_fn=geometry.identity_metric,
            )
            for a, b in zip(sgd.steps, rsgd.steps):
                np.testing.assert_array_equal(a.z, b.z)
                np.testing.assert_array_equal(a.x_hat, b.x_hat)
                assert a.confidence == b.confidence and a.loss == b.loss

    def test_unnormalized_updates_supported(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factual = below_hole_factuals(surface_bundle, 1)[0]
        config = cf.CeConfig(optimizer="sgd", iterations=10, normalize_gradient=False)
        traj = cf.generate_ce(vae, clf, factual, config)
        zs = np.stack([s.z for s in traj.steps])
        lengths = np.linalg.norm(np.diff(zs, axis=0), axis=1)
        assert not np.allclose(lengths, config.eta)  # raw gradient steps

    def test_surface_topology_fractions(self, surface_bundle):
        from riemce.evaluation import realism_distances

        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        train = surface_bundle["train"]
        factuals = below_hole_factuals(surface_bundle, 12)
        fractions = {}
        final_l_d = {}
        for optimizer in ("sgd", "rsgd"):
            trajs = [
                cf.generate_ce(vae, clf, f, cf.CeConfig(optimizer=optimizer, iterations=150))
                for f in factuals
            ]
            points = np.concatenate([np.stack([s.x_hat for s in t.steps]) for t in trajs])
            off = realism_distances(points, train.x) > 0.15
            fractions[optimizer] = off.mean()
            finals = np.stack([t.x_ce for t in trajs])
            final_l_d[optimizer] = realism_distances(finals, train.x).mean()
        assert fractions["rsgd"] <= 0.05
        assert fractions["sgd"] > fractions["rsgd"]
        # final counterfactuals land closer to the data at equal budget
        assert final_l_d["rsgd"] < final_l_d["sgd"]


class TestExtractAtThreshold:
    def _fake_trajectory(self, confidences):
        traj = cf.CeTrajectory(
            factual=np.zeros(2), target=1, optimizer="sgd", alpha=0.0, eta=0.1
        )
        traj.steps = [
            cf.CeStep(np.zeros(1), np.zeros(2), c, 0.0, 0.0, 0.0) for c in confidences
        ]
        return traj

    def test_threshold_zero_hits_first_update(self):
        traj = self._fake_trajectory([0.9, 0.1, 0.2])
        _, idx = cf.extract_at_threshold(traj, 0.0)
        assert idx == 1  # the initial point never counts

    def test_unreachable_threshold(self):
        traj = self._fake_trajectory([0.1, 0.4, 0.9])
        assert cf.extract_at_threshold(traj, 1.0) is None

    def test_monotone_sequence_first_hit(self):
        traj = self._fake_trajectory([0.1, 0.4, 0.6, 0.8])
        _, idx = cf.extract_at_threshold(traj, 0.5)
        assert idx == 2

    def test_first_hit_indices_monotone_in_threshold(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factuals = below_hole_factuals(surface_bundle, 6)
        taus = np.linspace(0.0, 0.95, 12)
        for factual in factuals:
            traj = cf.generate_ce(vae, clf, factual, cf.CeConfig(optimizer="rsgd", iterations=60))
            indices = [
                hit[1] for tau in taus if (hit := cf.extract_at_threshold(traj, tau))
            ]
            assert indices == sorted(indices)


class TestGenerateBatch:
    def test_parallelism_is_bit_identical(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factuals = below_hole_factuals(surface_bundle, 8)
        config = cf.CeConfig(optimizer="rsgd_c", iterations=15, thresholds=(0.5, 0.9))
        serial = cf.generate_batch(vae, clf, factuals, config, parallelism=1)
        parallel = cf.generate_batch(vae, clf, factuals, config, parallelism=8)
        assert len(serial) == len(parallel) == len(factuals)
        for a, b in zip(serial, parallel):
            assert a.first_hits == b.first_hits
            for sa, sb in zip(a.steps, b.steps):
                np.testing.assert_array_equal(sa.z, sb.z)
                np.testing.assert_array_equal(sa.x_hat, sb.x_hat)
                assert sa.loss == sb.loss and sa.confidence == sb.confidence

    def test_errors_become_flagged_trajectories(self, surface_bundle, blob_classifier):
        # blob classifier expects 2-D inputs; surface rows are 3-D, so every
        # sample fails and must come back flagged, not raise
        vae = surface_bundle["vae"]
        factuals = surface_bundle["test"].x[:3]
        out = cf.generate_batch(
            vae, blob_classifier, factuals, cf.CeConfig(optimizer="sgd", iterations=3)
        )
        assert len(out) == 3
        assert all(not t.valid and t.error for t in out)

    def test_order_preserved(self, surface_bundle):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factuals = below_hole_factuals(surface_bundle, 6)
        out = cf.generate_batch(
            vae, clf, factuals, cf.CeConfig(optimizer="sgd", iterations=3), parallelism=4
        )
        for traj, factual in zip(out, factuals):
            np.testing.assert_array_equal(traj.factual, factual)


class TestTrajectoryFiles:
    def test_jsonl_round_trip(self, surface_bundle, tmp_path):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factuals = below_hole_factuals(surface_bundle, 3)
        config = cf.CeConfig(optimizer="rsgd", iterations=10, thresholds=(0.5,))
        trajs = cf.generate_batch(vae, clf, factuals, config)
        path = tmp_path / "trajs.jsonl"
        cf.write_trajectories(path, trajs)
        loaded = cf.read_trajectories(path)
        assert len(loaded) == len(trajs)
        for a, b in zip(trajs, loaded):
            assert a.first_hits == b.first_hits
            np.testing.assert_array_equal(a.factual, b.factual)
            for sa, sb in zip(a.steps, b.steps):
                np.testing.assert_array_equal(sa.z, sb.z)
                assert sa.loss == sb.loss

    def test_write_is_deterministic(self, surface_bundle, tmp_path):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        factuals = below_hole_factuals(surface_bundle, 2)
        config = cf.CeConfig(optimizer="sgd", iterations=5)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        cf.write_trajectories(a, cf.generate_batch(vae, clf, factuals, config))
        cf.write_trajectories(b, cf.generate_batch(vae, clf, factuals, config))
        assert a.read_bytes() == b.read_bytes()

    def test_summary_csv(self, surface_bundle, tmp_path):
        vae, clf = surface_bundle["vae"], surface_bundle["clf"]
        train = surface_bundle["train"]
        factuals = below_hole_factuals(surface_bundle, 2)
        trajs = cf.generate_batch(
            vae, clf, factuals, cf.CeConfig(optimizer="sgd", iterations=4)
        )
        path = tmp_path / "summary.csv"
        cf.write_trajectory_summary(path, trajs, train.x)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "index,step,confidence,l_d,l2"
        assert len(lines) == 1 + 2 * 5  # two factuals, iterations+1 rows each
