import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoshot.encoder import IdentityEncoder
from protoshot.episodes import Dataset, Episode, MixtureSpec, make_gaussian_mixture
from protoshot.errors import ContractError
from protoshot.gradcheck import check_episode_loss, check_reinit_loss
from protoshot.numerics import Rng
from protoshot.prototypes import ConeProto, GaussianProto, HypersphereProto
from protoshot.training import (
    EpisodeResult,
    RadiusTrace,
    TrainConfig,
    TrainState,
    aggregate,
    apply_episode,
    compute_loss,
    draw_training_episode,
    episode_loss,
    evaluate,
    evaluate_episode,
    half_width,
    init_prototype_store,
    make_train_state,
    predict,
    radius_dynamics_run,
    train,
    train_step,
    vanilla_cross_entropy,
)


def two_point_classes():
    return Dataset(np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 10.0], [12.0, 10.0]]), [0, 0, 1, 1])


@pytest.fixture(scope="module")
def separable():
    return make_gaussian_mixture(
        MixtureSpec(n_classes=5, dim=4, samples_per_class=40, mean_scale=10.0, spread_lo=0.05, spread_hi=0.1, seed=3)
    )


@pytest.fixture(scope="module")
def mixture():
    return make_gaussian_mixture(MixtureSpec(n_classes=8, dim=4, samples_per_class=30, mean_scale=3.0, seed=5))


def make_episode(classes, sx, sy, qx, qy):
    return Episode(np.array(classes), np.array(sx, float), np.array(sy), np.array(qx, float), np.array(qy),
                   np.arange(len(sy)), np.arange(len(qy)))


class TestConfig:
    def test_baseline_alias(self):
        assert TrainConfig(variant="vanilla-baseline").variant == "vanilla"

    @pytest.mark.parametrize("kw", [{"variant": "box"}, {"mode": "lazy"}, {"n_way": 0}, {"lr_scale": -1.0},
                                    {"encoder_optimizer": "rmsprop"}])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            TrainConfig(**kw)

    def test_center_rate_defaults_to_scale_rate(self):
        assert TrainConfig(lr_scale=0.3).center_lr == 0.3
        assert TrainConfig(lr_scale=0.3, lr_center=0.01).center_lr == 0.01


class TestStoreInit:
    def test_closed_form(self):
        store = init_prototype_store(two_point_classes(), IdentityEncoder(2), 2, "hypersphere", Rng(0))
        np.testing.assert_array_equal(store.centers[0], [1, 0])
        assert store.scales[0] == 1.0

    def test_one_shot_radii_are_zero(self, mixture):
        store = init_prototype_store(mixture, IdentityEncoder(4), 1, "hypersphere", Rng(0))
        assert np.all(store.scales == 0.0)

    def test_one_prototype_per_class(self):
        ds = make_gaussian_mixture(MixtureSpec(n_classes=20, dim=3, samples_per_class=6))
        assert len(init_prototype_store(ds, IdentityEncoder(3), 5, "gaussian", Rng(0))) == 20

    def test_short_class(self):
        with pytest.raises(Exception, match="class"):
            init_prototype_store(two_point_classes(), IdentityEncoder(2), 3, "hypersphere", Rng(0))

    def test_deterministic(self, mixture):
        a = init_prototype_store(mixture, IdentityEncoder(4), 3, "cone", Rng(1))
        b = init_prototype_store(mixture, IdentityEncoder(4), 3, "cone", Rng(1))
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.scales, b.scales)


class TestEpisodeLoss:
    def test_equal_measurements(self):
        # both surfaces pass through the query, so M = (0, 0)
        protos = [HypersphereProto(np.array([1.0, 0.0]), 1.0), HypersphereProto(np.array([0.0, 1.0]), 1.0)]
        res = episode_loss(IdentityEncoder(2), protos, [0, 1], [[0.0, 0.0]], [0], "hypersphere")
        assert res.loss == pytest.approx(math.log(2), abs=1e-15)
        # dL/d(radius) = (1[n = target] - p_n) * dM/d(radius), with dM/d(radius) = -1
        np.testing.assert_allclose(res.scale_grads, [-0.5, 0.5], atol=1e-15)

    def test_scale_gradients_match_differences(self):
        centers = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]

        def loss(e):
            protos = [HypersphereProto(c, r) for c, r in zip(centers, e)]
            return episode_loss(IdentityEncoder(2), protos, [0, 1], [[0.0, 0.0]], [0], "hypersphere").loss

        h = 1e-6
        num = [(loss([1 + h, 1]) - loss([1 - h, 1])) / (2 * h), (loss([1, 1 + h]) - loss([1, 1 - h])) / (2 * h)]
        np.testing.assert_allclose(num, [-0.5, 0.5], atol=1e-9)

    def test_softmax_ratio(self):
        protos = [HypersphereProto(np.zeros(1), 0.0), HypersphereProto(np.zeros(1), -math.log(3))]
        res = episode_loss(IdentityEncoder(1), protos, [0, 1], [[0.0]], [0], "hypersphere")
        assert res.loss == pytest.approx(-math.log(0.75), abs=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_equal_radii_match_plain_prototype_loss(self, seed, eps):
        r = Rng(seed)
        n, q, d = 4, 6, 3
        centers, qx = r.normal((n, d)), r.normal((q, d))
        qy = r.integers(0, n, size=q)
        protos = [HypersphereProto(c, eps) for c in centers]
        res = episode_loss(IdentityEncoder(d), protos, list(range(n)), qx, qy, "hypersphere")
        assert res.loss == pytest.approx(vanilla_cross_entropy(qx, centers, qy), abs=1e-10)

    def test_label_outside_episode(self):
        protos = [HypersphereProto(np.zeros(1), 0.0), HypersphereProto(np.ones(1), 0.0)]
        with pytest.raises(ContractError):
            episode_loss(IdentityEncoder(1), protos, [0, 1], [[0.0]], [5], "hypersphere")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["hypersphere", "cone", "gaussian", "vanilla"]))
    def test_probabilities_normalized(self, seed, variant):
        r = Rng(seed)
        centers = r.normal((5, 3))
        protos = [HypersphereProto(c, 0.3) if variant in ("hypersphere", "vanilla") else
                  (ConeProto(c, 0.3) if variant == "cone" else GaussianProto(c, 0.1))
                  for c in centers]
        res = episode_loss(IdentityEncoder(3), protos, list(range(5)), r.normal((7, 3)), r.integers(0, 5, 7), variant)
        assert np.abs(res.probs.sum(axis=1) - 1.0).max() <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_scale_gradient_signs(self, seed, n):
        r = Rng(seed)
        centers, eps = r.normal((n, 3)), r.normal(n)
        target = int(r.integers(0, n))
        protos = [HypersphereProto(c, e) for c, e in zip(centers, eps)]
        res = episode_loss(IdentityEncoder(3), protos, list(range(n)), r.normal((1, 3)), [target], "hypersphere")
        p = res.probs[0]
        expected = p.copy()
        expected[target] -= 1.0
        np.testing.assert_allclose(res.scale_grads, expected, atol=1e-15)
        assert res.scale_grads[target] <= 0.0
        assert np.all(np.delete(res.scale_grads, target) >= 0.0)

    def test_cone_total_is_sum_of_parts(self):
        protos = [ConeProto(np.array([1.0, 0.0]), 0.4), ConeProto(np.array([1.0, 0.3]), 0.3)]
        res = episode_loss(IdentityEncoder(2), protos, [0, 1], [[0.0, 1.0], [1.0, -1.0]], [0, 1], "cone")
        assert res.dis_loss > 0.0
        assert res.loss == res.cls_loss + res.dis_loss

    def test_vanilla_never_moves_scales(self):
        protos = [HypersphereProto(np.zeros(2), 0.0), HypersphereProto(np.ones(2), 0.0)]
        res = episode_loss(IdentityEncoder(2), protos, [0, 1], [[0.2, 0.1]], [1], "vanilla")
        assert not np.any(res.scale_grads)

    @pytest.mark.parametrize("variant", ["hypersphere", "vanilla", "cone", "gaussian"])
    def test_end_to_end_gradients(self, variant):
        assert check_episode_loss(20, Rng(21), variant) < 1e-5

    def test_reinit_gradients(self):
        assert check_reinit_loss(20, Rng(22)) < 1e-5


class TestTrainStep:
    def toy(self):
        x = np.array([[-1.0, 0.0], [-1.2, 0.1], [-0.9, -0.1], [1.0, 0.0], [1.1, 0.2], [0.8, -0.1]])
        return Dataset(x, [0, 0, 0, 1, 1, 1])

    def test_loss_decreases_on_separable_toy(self):
        ds = self.toy()
        cfg = TrainConfig(n_way=2, k_shot=2, k_query=3, lr_scale=1e-3, scale_optimizer="sgd")
        state = make_train_state(cfg, ds, Rng(0))
        te = draw_training_episode(ds, cfg, Rng(1))
        before = apply_episode(state, ds, cfg, te).loss
        assert compute_loss(state, ds, cfg, te).loss < before

    def test_zero_encoder_rate_freezes_encoder(self, mixture):
        cfg = TrainConfig(encoder_dims=[4, 6, 3], lr_encoder=0.0, n_way=3, k_query=3)
        state = make_train_state(cfg, mixture, Rng(0))
        before = state.encoder.flat_params().copy()
        for _ in range(5):
            train_step(state, mixture, cfg, Rng(2))
        np.testing.assert_array_equal(state.encoder.flat_params(), before)

    @pytest.mark.parametrize("mode", ["persistent", "episodic-reinit"])
    def test_deterministic(self, mixture, mode):
        cfg = TrainConfig(encoder_dims=[4, 6, 3], n_way=3, k_shot=2, k_query=3, steps=20, mode=mode,
                          encoder_optimizer="adam")
        a, la = train(cfg, mixture, Rng(4))
        b, lb = train(cfg, mixture, Rng(4))
        np.testing.assert_array_equal(a.encoder.flat_params(), b.encoder.flat_params())
        np.testing.assert_array_equal(a.store.scales, b.store.scales)
        np.testing.assert_array_equal(la, lb)

    def test_only_episode_classes_move(self, mixture):
        cfg = TrainConfig(n_way=3, k_query=3)
        state = make_train_state(cfg, mixture, Rng(0))
        c0, s0 = state.store.centers.copy(), state.store.scales.copy()
        te = draw_training_episode(mixture, cfg, Rng(3))
        apply_episode(state, mixture, cfg, te)
        untouched = np.setdiff1d(np.arange(mixture.n_classes), te.classes)
        np.testing.assert_array_equal(state.store.centers[untouched], c0[untouched])
        np.testing.assert_array_equal(state.store.scales[untouched], s0[untouched])
        assert np.any(state.store.scales[te.classes] != s0[te.classes])

    def test_reinit_mode_keeps_stored_centers(self, mixture):
        cfg = TrainConfig(n_way=3, k_shot=2, k_query=3, mode="episodic-reinit", steps=10)
        state0 = make_train_state(cfg, mixture, Rng(0).fork(2))
        state, _ = train(cfg, mixture, Rng(0))
        np.testing.assert_array_equal(state.store.centers, state0.store.centers)

    def test_training_progress(self, separable):
        cfg = TrainConfig(steps=200, eval_episodes=100)
        state, losses = train(cfg, separable, Rng(0))
        assert losses[-1] < losses[0]
        assert losses[-20:].mean() < losses[:20].mean()
        assert evaluate(state.encoder, separable, cfg, Rng(1)).accuracy == 1.0

    @pytest.mark.parametrize("variant", ["cone", "gaussian"])
    def test_other_variants_train(self, separable, variant):
        cfg = TrainConfig(variant=variant, steps=100, encoder_dims=[4, 8, 4], lr_scale=1e-2)
        state, losses = train(cfg, separable, Rng(0))
        assert np.all(np.isfinite(losses)) and np.all(np.isfinite(state.store.scales))

    def test_checkpoint_round_trip(self, mixture):
        cfg = TrainConfig(encoder_dims=[4, 5, 3], n_way=3, k_query=2, steps=5, encoder_optimizer="adam")
        state, _ = train(cfg, mixture, Rng(0))
        back = TrainState.from_dict(state.to_dict())
        np.testing.assert_array_equal(back.encoder.flat_params(), state.encoder.flat_params())
        np.testing.assert_array_equal(back.store.scales, state.store.scales)
        assert back.step == 5
        # continuing from the checkpoint matches continuing the original
        train_step(state, mixture, cfg, Rng(9))
        train_step(back, mixture, cfg, Rng(9))
        np.testing.assert_array_equal(back.encoder.flat_params(), state.encoder.flat_params())
        np.testing.assert_array_equal(back.store.centers, state.store.centers)


class TestEvaluateEpisode:
    def test_separated_clusters(self):
        ep = make_episode([0, 1], [[0, 0], [0.1, 0], [9, 9], [9, 9.1]], [0, 0, 1, 1],
                          [[0.05, 0.02], [9.1, 9.0]], [0, 1])
        assert evaluate_episode(IdentityEncoder(2), ep, "hypersphere").accuracy == 1.0

    @pytest.mark.parametrize("variant", ["hypersphere", "vanilla", "gaussian"])
    def test_tie_goes_to_lower_class(self, variant):
        # mirror-image supports, query on the mirror line
        ep = make_episode([3, 7], [[1, 1], [1, 3], [3, 1], [3, 3]], [3, 3, 7, 7], [[2, 2]], [7])
        assert predict(IdentityEncoder(2), ep, variant).tolist() == [3]

    def test_cone_tie_goes_to_lower_class(self):
        # supports mirrored about the diagonal, query on the diagonal
        ep = make_episode([3, 7], [[1, 0.1], [1, 0.3], [0.1, 1], [0.3, 1]], [3, 3, 7, 7], [[1, 1]], [7])
        assert predict(IdentityEncoder(2), ep, "cone").tolist() == [3]

    def test_equal_spread_matches_vanilla(self):
        r = Rng(0)
        offsets = np.array([[1.0, 0.0], [-1.0, 0.0]])
        for _ in range(50):
            means = r.normal((4, 2)) * 3
            sx = np.concatenate([m + offsets for m in means])
            sy = np.repeat(np.arange(4), 2)
            qx = r.normal((20, 2)) * 3
            ep = make_episode(list(range(4)), sx, sy, qx, r.integers(0, 4, 20))
            np.testing.assert_array_equal(predict(IdentityEncoder(2), ep, "hypersphere"),
                                          predict(IdentityEncoder(2), ep, "vanilla"))


class TestEvaluate:
    def test_perfect_episodes(self, separable):
        m = evaluate(IdentityEncoder(4), separable, TrainConfig(eval_episodes=50), Rng(0))
        assert m.accuracy == 1.0 and m.accuracy_ci == 0.0 and m.n_episodes == 50
        assert m.f1 == 1.0

    def test_single_episode_has_zero_half_width(self, mixture):
        m = evaluate(IdentityEncoder(4), mixture, TrainConfig(eval_episodes=1, n_way=3), Rng(0))
        assert m.accuracy_ci == 0.0

    def test_half_width_formula(self):
        v = [0.5, 0.7, 0.9, 0.6]
        assert half_width(v) == pytest.approx(1.96 * np.std(v, ddof=1) / 2, abs=1e-15)

    def test_deterministic_and_parallel_safe(self, mixture):
        cfg = TrainConfig(eval_episodes=60, n_way=4, k_shot=2, k_query=4)
        a = evaluate(IdentityEncoder(4), mixture, cfg, Rng(3))
        b = evaluate(IdentityEncoder(4), mixture, cfg, Rng(3), jobs=4)
        assert a.rows() == b.rows()

    def test_precision_recall_from_confusion(self):
        conf = np.array([[2, 1], [0, 3]])
        r = EpisodeResult(5 / 6, conf, np.array([0, 1]), np.array([]))
        m = aggregate([r])
        prec, rec = np.array([1.0, 0.75]), np.array([2 / 3, 1.0])
        assert m.precision == pytest.approx(prec.mean())
        assert m.recall == pytest.approx(rec.mean())
        assert m.f1 == pytest.approx(np.mean(2 * prec * rec / (prec + rec)))
        assert m.per_class[1]["precision"][0] == pytest.approx(0.75)

    def test_no_episodes(self):
        with pytest.raises(ContractError):
            aggregate([])


@pytest.fixture(scope="module")
def ds():
    return make_gaussian_mixture(MixtureSpec(n_classes=8, dim=4, samples_per_class=40, mean_scale=2.0, seed=1))


class TestRadiusDynamics:
    def test_length(self, ds):
        cfg = TrainConfig(n_way=3, k_query=5, lr_scale=1e-2)
        tr = radius_dynamics_run(cfg, ds, anchor=2, warmup=40, total=200, log_every=10, max_retries=5, rng=Rng(0))
        assert len(tr) == 16
        assert tr.steps == list(range(50, 201, 10))
        assert all(0.0 <= a <= 1.0 for a in tr.accuracy)

    def test_frozen_radius(self, ds):
        cfg = TrainConfig(n_way=3, k_query=5, lr_scale=0.0, lr_center=1e-2)
        tr = radius_dynamics_run(cfg, ds, warmup=20, total=100, log_every=10, max_retries=5, rng=Rng(0))
        assert len(set(tr.radius)) == 1

    def test_requires_persistent_hypersphere(self, ds):
        with pytest.raises(ContractError):
            radius_dynamics_run(TrainConfig(variant="cone"), ds)
        with pytest.raises(ContractError):
            radius_dynamics_run(TrainConfig(mode="episodic-reinit"), ds)

    def test_unknown_anchor(self, ds):
        with pytest.raises(ContractError):
            radius_dynamics_run(TrainConfig(n_way=3), ds, anchor=99)

    def test_trace_steps_increase(self):
        tr = RadiusTrace()
        tr.append(10, 1.0, 1.0, 0.5)
        with pytest.raises(ContractError):
            tr.append(10, 1.0, 1.0, 0.5)
