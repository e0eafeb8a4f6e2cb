"""Training: losses, synthetic-data statistics, and learning smoke checks."""

import math

import numpy as np
import pytest

from caransac.geometry import FUNDAMENTAL, correspondence_arrays, fundamental_from_pose, homogenize, sampson_sq_arrays
from caransac.neural import MlpBundle
from caransac.training import (
    PairSpec,
    TrainConfig,
    aggregate_loss,
    batch_weights,
    evaluate_loss,
    generate_synthetic,
    loss_inlier,
    loss_inlier_grad,
    loss_pose,
    model_pose_error,
    pair_gradients,
    pair_labels,
    relabel,
    train,
)


class TestLossInlier:
    def test_uniform_half_is_log_two(self):
        probs = np.full(10, 0.5)
        labels = np.array([1, 0] * 5, dtype=float)
        assert loss_inlier(probs, labels) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_predictions_vanish(self):
        labels = np.array([1.0, 0.0, 1.0])
        probs = np.array([1 - 1e-12, 1e-12, 1 - 1e-12])
        assert loss_inlier(probs, labels) < 1e-10

    def test_two_point_example(self):
        value = loss_inlier(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        assert value == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
        assert value == pytest.approx(0.1643, abs=1e-4)

    def test_gradient_matches_finite_differences(self, rng):
        probs = rng.uniform(0.05, 0.95, 12)
        labels = rng.integers(0, 2, 12).astype(float)
        grad = loss_inlier_grad(probs, labels)
        h = 1e-7
        for i in range(12):
            up = probs.copy()
            up[i] += h
            dn = probs.copy()
            dn[i] -= h
            fd = (loss_inlier(up, labels) - loss_inlier(dn, labels)) / (2 * h)
            assert fd == pytest.approx(grad[i], rel=1e-5, abs=1e-10)

    def test_nonnegative(self, rng):
        for _ in range(20):
            probs = rng.uniform(1e-6, 1 - 1e-6, 30)
            labels = rng.integers(0, 2, 30).astype(float)
            assert loss_inlier(probs, labels) >= 0.0


class TestLossPose:
    def test_perfect_estimate(self):
        pair = generate_synthetic(PairSpec(n=40, inlier_rate=1.0, noise_sigma_px=0.0, seed=1))
        model = fundamental_from_pose(pair.pose, pair.k1, pair.k2)
        assert loss_pose(model, pair) < 1e-5

    def test_clamped_at_thirty(self):
        pair = generate_synthetic(PairSpec(n=40, inlier_rate=1.0, noise_sigma_px=0.0, seed=2))
        from caransac.geometry import RelativePose, rodrigues

        bad_pose = RelativePose(
            rodrigues(np.array([0.0, math.radians(45.0), 0.0])) @ pair.pose.rotation,
            pair.pose.translation,
        )
        model = fundamental_from_pose(bad_pose, pair.k1, pair.k2)
        assert loss_pose(model, pair) == pytest.approx(30.0)

    def test_intermediate_error_passes_through(self):
        pair = generate_synthetic(PairSpec(n=40, inlier_rate=1.0, noise_sigma_px=0.0, seed=3))
        from caransac.geometry import RelativePose, rodrigues

        tilted = RelativePose(
            rodrigues(np.array([0.0, 0.0, math.radians(10.0)])) @ pair.pose.rotation,
            pair.pose.translation,
        )
        model = fundamental_from_pose(tilted, pair.k1, pair.k2)
        assert loss_pose(model, pair) == pytest.approx(10.0, abs=1e-3)

    def test_zero_model_clamps(self):
        from caransac.geometry import ModelHypothesis

        pair = generate_synthetic(PairSpec(n=40, inlier_rate=1.0, noise_sigma_px=0.0, seed=4))
        assert loss_pose(ModelHypothesis.zero(FUNDAMENTAL), pair) == 30.0


class TestAggregateLoss:
    def test_four_batch_weights(self):
        w = batch_weights(4, 0.1)
        assert np.allclose(w, [0.729, 0.81, 0.9, 1.0])

    def test_epsilon_zero_unweighted_sum(self):
        losses = [(1.0, 6.0), (2.0, 12.0)]
        cfg = TrainConfig(epsilon=1e-12, pose_weight=0.5)
        assert aggregate_loss(losses, cfg) == pytest.approx(1 + 3 + 2 + 6, rel=1e-9)

    def test_single_batch(self):
        cfg = TrainConfig(pose_weight=1.0 / 60.0)
        assert aggregate_loss([(0.4, 6.0)], cfg) == pytest.approx(0.4 + 0.1)

    def test_monotone_in_components(self, rng):
        cfg = TrainConfig()
        base = [(0.5, 10.0), (0.4, 5.0), (0.3, 2.0)]
        value = aggregate_loss(base, cfg)
        for q in range(3):
            for comp in range(2):
                bumped = [list(x) for x in base]
                bumped[q][comp] += 0.1
                assert aggregate_loss([tuple(x) for x in bumped], cfg) > value


class TestGenerateSynthetic:
    def test_noise_free_all_inliers(self):
        pair = generate_synthetic(PairSpec(n=50, inlier_rate=1.0, noise_sigma_px=0.0, seed=5))
        labels = pair_labels(pair)
        assert labels.all()
        f = fundamental_from_pose(pair.pose, pair.k1, pair.k2)
        p1, p2 = correspondence_arrays(pair.correspondences)
        assert sampson_sq_arrays(f.m, homogenize(p1), homogenize(p2)).max() < 1e-18

    def test_label_fraction_near_rate(self):
        pair = generate_synthetic(PairSpec(n=1000, inlier_rate=0.2, noise_sigma_px=0.5, seed=6))
        frac = pair_labels(pair).mean()
        assert 0.15 <= frac <= 0.25

    def test_zero_overlap_side_info_separates(self):
        pair = generate_synthetic(
            PairSpec(n=300, inlier_rate=0.5, noise_sigma_px=0.0, side_info_overlap=0.0, seed=7)
        )
        labels = pair_labels(pair)
        side = np.array([c.side_info for c in pair.correspondences])
        assert side[labels].max() < 0.5 + 1e-12
        assert side[~labels].min() > 0.5 - 1e-12

    def test_relabel_idempotent(self):
        pair = generate_synthetic(PairSpec(n=200, inlier_rate=0.4, noise_sigma_px=1.0, seed=8))
        once = relabel(pair)
        twice = relabel(once)
        assert pair_labels(once).tolist() == pair_labels(twice).tolist()
        assert pair_labels(once).tolist() == pair_labels(pair).tolist()

    def test_deterministic_given_seed(self):
        a = generate_synthetic(PairSpec(n=100, inlier_rate=0.5, noise_sigma_px=0.5, seed=9))
        b = generate_synthetic(PairSpec(n=100, inlier_rate=0.5, noise_sigma_px=0.5, seed=9))
        pa, _ = correspondence_arrays(a.correspondences)
        pb, _ = correspondence_arrays(b.correspondences)
        assert np.array_equal(pa, pb)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            PairSpec(n=100, inlier_rate=0.0)
        with pytest.raises(ValueError):
            PairSpec(n=100, noise_sigma_px=-1.0)
        with pytest.raises(ValueError):
            PairSpec(n=4)


@pytest.fixture(scope="module")
def tiny_dataset():
    rng = np.random.default_rng(42)
    pairs = []
    for i in range(14):
        rate = float(rng.choice([0.4, 0.6, 0.8]))
        pairs.append(
            generate_synthetic(
                PairSpec(n=120, inlier_rate=rate, noise_sigma_px=0.5, side_info_overlap=0.6, seed=300 + i)
            )
        )
    return pairs


class TestTrain:
    def test_one_epoch_reduces_training_loss(self, tiny_dataset):
        cfg = TrainConfig(
            epochs=2, learning_rate=0.03, seed=2, batches=2, batch_size=128, pairs_per_update=4
        )
        init = evaluate_loss(MlpBundle.initialize(cfg.seed), tiny_dataset[:10], cfg)
        result = train(tiny_dataset[:10], cfg, val=tiny_dataset[10:])
        final = evaluate_loss(result.bundle, tiny_dataset[:10], cfg)
        assert final < init

    def test_separable_side_info_learned_fast(self):
        # with disjoint side-information supports the initializer alone can
        # classify; a short run should push the first-batch cross-entropy low
        rng = np.random.default_rng(11)
        pairs = [
            generate_synthetic(
                PairSpec(
                    n=150,
                    inlier_rate=float(rng.uniform(0.3, 0.7)),
                    noise_sigma_px=0.3,
                    side_info_overlap=0.0,
                    seed=500 + i,
                )
            )
            for i in range(20)
        ]
        cfg = TrainConfig(
            epochs=6, learning_rate=0.05, seed=3, batches=1, batch_size=128, pairs_per_update=4
        )
        result = train(pairs[:16], cfg, val=pairs[16:])
        from caransac.training import pair_forward

        bces = []
        for i, pair in enumerate(pairs[16:]):
            _, per_batch, _, _ = pair_forward(result.bundle, pair, cfg, 900 + i)
            bces.append(per_batch[0][0])
        assert float(np.mean(bces)) < 0.1

    def test_alpha_moves_when_mlps_frozen(self):
        # alpha only matters once probabilities spread; with a frozen
        # near-uniform decoder the weights rescale globally and the
        # refinement is invariant. Train alpha against a wide decoder on
        # high-noise pairs, where the weighting genuinely shifts the fit.
        rng = np.random.default_rng(21)
        pairs = [
            generate_synthetic(
                PairSpec(
                    n=150,
                    inlier_rate=float(rng.uniform(0.5, 0.8)),
                    noise_sigma_px=2.0,
                    side_info_overlap=0.5,
                    seed=700 + i,
                )
            )
            for i in range(10)
        ]
        cfg = TrainConfig(
            epochs=4,
            learning_rate=0.1,
            seed=4,
            batches=4,
            batch_size=256,
            freeze_mlps=True,
            pairs_per_update=2,
        )
        start = MlpBundle.initialize(cfg.seed)
        start.inlier_decoder.layers[-1].w *= 40.0
        result = train(pairs, cfg, initial=start)
        assert abs(result.history[-1]["alpha"] - 1.0) > 1e-3
        # frozen nets stay at their starting point
        assert np.array_equal(
            result.bundle.init_state.layers[0].w, start.init_state.layers[0].w
        )

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train([], TrainConfig())

    def test_history_is_logged(self, tiny_dataset):
        lines = []
        cfg = TrainConfig(epochs=2, learning_rate=0.01, seed=5, batches=1, batch_size=64)
        result = train(tiny_dataset[:6], cfg, val=tiny_dataset[6:8], log=lines.append)
        assert len(result.history) == 2
        assert len(lines) == 2
        assert all("val_loss" in line for line in lines)

    def test_gradient_sign_spot_check(self, tiny_dataset):
        # bumping a parameter along +grad direction increases the loss for
        # parameters with meaningful gradient magnitude
        cfg = TrainConfig(epochs=1, seed=6, batches=2, batch_size=128)
        bundle = MlpBundle.initialize(cfg.seed)
        pair = tiny_dataset[0]
        loss0, grads = pair_gradients(bundle, pair, cfg, 77)
        rng = np.random.default_rng(0)
        layer = bundle.inlier_decoder.layers[0]
        gw = grads.nets["inlier_decoder"][0][0]
        strong = np.argwhere(np.abs(gw) > np.percentile(np.abs(gw), 99.5))
        checked = agree = 0
        from caransac.training import pair_forward

        for r, c in strong[:20]:
            step = 1e-4
            layer.w[r, c] += step * np.sign(gw[r, c])
            loss1, _, _, _ = pair_forward(bundle, pair, cfg, 77)
            layer.w[r, c] -= step * np.sign(gw[r, c])
            checked += 1
            if loss1 > loss0:
                agree += 1
        assert checked >= 10
        assert agree / checked >= 0.9
