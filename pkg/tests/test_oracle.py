"""Oracle tests: enumeration, dual-route gradients, estimator bias."""

import math

import numpy as np
import pytest

from stopcascade import presets
from stopcascade.cascade import (
    Cascade,
    RewardSpec,
    run_rollout,
    selection_distribution,
)
from stopcascade.data import Dataset
from stopcascade.errors import ConfigError, SizeGuardError
from stopcascade.nn import DenseLayer, FeedForwardNet
from stopcascade.oracle import (
    estimator_bias_check,
    exact_gradient,
    exact_gradient_fd,
    exact_objective,
    fd_component,
    path_enumeration_check,
)


def one_hot_classifier(num_classes, hot, sharpness=200.0, input_dim=2):
    """Classifier whose softmax output is (numerically) one-hot at `hot`."""
    w = np.zeros((input_dim, num_classes))
    b = np.zeros(num_classes)
    b[hot] = sharpness
    return FeedForwardNet([DenseLayer(w, b)])


def uniform_classifier(num_classes, input_dim=2):
    return FeedForwardNet([DenseLayer(np.zeros((input_dim, num_classes)),
                                      np.zeros(num_classes))])


def single_stage(classifier):
    return Cascade([classifier], [], [1.0])


def two_point_dataset(num_classes=2, labels=(0, 1)):
    return Dataset(np.array([[0.0, 0.0], [1.0, -1.0]]),
                   np.array(labels), num_classes)


class TestExactObjective:
    def test_deterministic_correct_classifier_zero(self):
        c = single_stage(one_hot_classifier(2, hot=0))
        ds = Dataset(np.zeros((3, 2)), np.zeros(3, dtype=int), 2)
        rep = exact_objective(c, ds, RewardSpec(alpha=0.0))
        assert rep.objective == pytest.approx(0.0, abs=1e-12)

    def test_uniform_classifier_closed_form(self):
        # zero-one loss, uniform over m classes: J = -(m-1)/m
        for m in (2, 3, 5):
            c = single_stage(uniform_classifier(m))
            ds = Dataset(np.zeros((4, 2)), np.zeros(4, dtype=int), m)
            rep = exact_objective(c, ds, RewardSpec(alpha=0.0))
            assert rep.objective == pytest.approx(-(m - 1) / m, abs=1e-12)

    def test_two_stage_hand_enumeration(self):
        # fixed probs and stop probability; worked out by hand below
        clf1 = one_hot_classifier(2, hot=0, sharpness=math.log(3.0))
        # logits [log 3, 0] -> probs [0.75, 0.25]
        clf2 = one_hot_classifier(2, hot=1, sharpness=math.log(4.0))
        # probs [0.2, 0.8]
        pol = FeedForwardNet([DenseLayer(np.zeros((2, 2)),
                                         np.array([math.log(3.0), 0.0]))])
        # stop prob = 0.75
        c = Cascade([clf1, clf2], [pol], [1.0, 3.0])
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 2)
        spec = RewardSpec(alpha=0.1)
        rep = exact_objective(c, ds, spec)
        # normalized costs: [1/3, 1]; cum inclusive: [1/3, 4/3]
        # k=1: E[-L] = -(0.25); R_cost = 0.1/3
        # k=2: E[-L] = -(0.8); R_cost = 0.1*4/3
        expected = 0.75 * (-0.25 - 0.1 / 3.0) + 0.25 * (-0.8 - 0.4 / 3.0)
        assert rep.objective == pytest.approx(expected, abs=1e-9)
        np.testing.assert_allclose(rep.per_sample_selection[0], [0.75, 0.25])

    def test_dataset_order_invariance(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        rev = Dataset(ds.features[::-1].copy(), ds.labels[::-1].copy(),
                      ds.num_classes)
        a = exact_objective(c, ds, spec).objective
        b = exact_objective(c, rev, spec).objective
        assert a == pytest.approx(b, rel=1e-12)

    def test_enumeration_guard(self):
        c = presets.tiny_cascade()
        n = (10 ** 6) // (3 * 2) + 1
        big = Dataset(np.zeros((n, 4)), np.zeros(n, dtype=int), 2)
        with pytest.raises(SizeGuardError):
            exact_objective(c, big, RewardSpec(alpha=0.0))


class TestExactGradient:
    def test_matches_finite_differences(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        fd = exact_gradient_fd(c, ds, spec, eps=1e-6)
        an = exact_gradient(c, ds, spec)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1.0)
        assert np.max(np.abs(fd - an) / denom) < 1e-5

    def test_matches_fd_in_log_mode(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = RewardSpec(alpha=0.05, loss="log")
        fd = exact_gradient_fd(c, ds, spec, eps=1e-6)
        an = exact_gradient(c, ds, spec)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1.0)
        assert np.max(np.abs(fd - an) / denom) < 1e-5

    def test_logit_shift_direction_is_flat(self):
        # shifting every logit of a softmax head leaves J unchanged
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        an = exact_gradient(c, ds, spec)
        # final-layer bias entries of classifier 0 occupy a known slice:
        # layer0 W (4*8) + b (8) + layer1 W (16), then the 2 bias entries
        start = 4 * 8 + 8 + 8 * 2
        shift_sum = an[start] + an[start + 1]
        assert abs(shift_sum) < 1e-10

    def test_fd_eps_validation(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        with pytest.raises(ConfigError):
            exact_gradient_fd(c, ds, presets.tiny_reward_spec(), eps=1.0)

    def test_fd_error_scales_quadratically(self):
        # Richardson-style: halving eps should shrink the FD error ~4x on a
        # component with visible truncation error
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        an = exact_gradient(c, ds, spec)
        eps0 = 1e-4
        coarse = np.array([fd_component(c, ds, spec, j, eps0)
                           for j in range(40)])
        j_star = int(np.argmax(np.abs(coarse - an[:40])))
        e1 = abs(coarse[j_star] - an[j_star])
        e2 = abs(fd_component(c, ds, spec, j_star, eps0 / 2) - an[j_star])
        if e1 < 1e-12:
            pytest.skip("objective too linear here to expose truncation error")
        ratio = e1 / max(e2, 1e-18)
        assert 2.0 < ratio < 8.0


class TestEstimatorBias:
    def test_unbiased_at_moderate_n(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        fd = exact_gradient_fd(c, ds, spec, eps=1e-6)
        rep = estimator_bias_check(c, ds, spec, 20_000, seed=3, baseline=0.0,
                                   reference=fd)
        assert rep.max_abs_z < 4.0

    def test_constant_baseline_same_expectation(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        fd = exact_gradient_fd(c, ds, spec, eps=1e-6)
        mean_r = exact_objective(c, ds, spec).objective
        rep = estimator_bias_check(c, ds, spec, 20_000, seed=5,
                                   baseline=mean_r, reference=fd)
        assert rep.max_abs_z < 4.0

    def test_excluded_components_reported(self):
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        fd = exact_gradient_fd(c, ds, spec, eps=1e-6)
        rep = estimator_bias_check(c, ds, spec, 2_000, seed=7, baseline=0.0,
                                   reference=fd)
        # zero-variance components must be listed and carry NaN z-scores
        for j in rep.excluded:
            assert math.isnan(rep.z_scores[j])
            assert fd[j] == pytest.approx(0.0, abs=1e-9)

    def test_score_mean_is_zero(self):
        # E[grad log p(trajectory)] = 0, which is exactly why any constant
        # baseline leaves the estimator's expectation unchanged
        c = presets.tiny_cascade()
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        from stopcascade.cascade import flatten_grad_dict
        from stopcascade.training import trajectory_score

        rng = np.random.default_rng(55)
        n = ds.n_samples
        n_rollouts = 20_000
        dim = sum(net.num_params() for net in c.all_nets())
        total = np.zeros(dim)
        total_sq = np.zeros(dim)
        for i in range(n_rollouts):
            ro = run_rollout(c, ds.features[i % n], int(ds.labels[i % n]),
                             rng, spec)
            cg, pg = trajectory_score(c, ro)
            v = flatten_grad_dict(c, cg, pg)
            total += v
            total_sq += v * v
        mean = total / n_rollouts
        var = np.maximum(total_sq / n_rollouts - mean * mean, 0.0)
        se = np.sqrt(var / n_rollouts)
        active = se > 1e-15
        z = np.abs(mean[active]) / se[active]
        assert z.max() < 4.0

    def test_saturated_policy_components_excluded(self):
        c = presets.tiny_cascade()
        # saturate policy 1: stop logit huge, so continue events never happen
        c.policies[0].layers[-1].bias[0] = 60.0
        c.policies[0].version += 1
        ds = presets.tiny_dataset()
        spec = presets.tiny_reward_spec()
        fd = np.zeros(sum(n.num_params() for n in c.all_nets()))
        rep = estimator_bias_check(c, ds, spec, 500, seed=9, baseline=0.0,
                                   reference=fd)
        # deeper networks are never executed: all their components excluded
        assert len(rep.excluded) > 100


class TestPathEnumeration:
    def test_hand_values(self):
        np.testing.assert_allclose(path_enumeration_check([0.2, 0.5, 1.0]),
                                   [0.2, 0.4, 0.4], rtol=0, atol=1e-15)

    def test_uniform_half(self):
        np.testing.assert_allclose(path_enumeration_check([0.5, 0.5, 0.5, 1.0]),
                                   [0.5, 0.25, 0.125, 0.125], rtol=0, atol=1e-15)

    def test_single_stage(self):
        np.testing.assert_array_equal(path_enumeration_check([1.0]), [1.0])

    def test_matches_selection_distribution(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            k = int(rng.integers(1, 9))
            p = np.append(rng.random(k - 1), 1.0)
            np.testing.assert_allclose(path_enumeration_check(p),
                                       selection_distribution(p),
                                       rtol=0, atol=1e-12)

    def test_mass_sums_to_one(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            k = int(rng.integers(1, 9))
            p = np.append(rng.random(k - 1), 1.0)
            assert path_enumeration_check(p).sum() == pytest.approx(1.0, abs=1e-12)

    def test_depth_guard(self):
        with pytest.raises(SizeGuardError):
            path_enumeration_check(np.append(np.full(24, 0.5), 1.0))


class TestDirectionalImprovement:
    def test_better_deep_classifier_pulls_continue(self):
        # classifier 2 is right, classifier 1 is wrong: with alpha=0, raising
        # the continue probability (lowering pi_1) must not decrease J
        clf1 = one_hot_classifier(2, hot=1)  # wrong for label 0
        clf2 = one_hot_classifier(2, hot=0)  # right
        pol = FeedForwardNet([DenseLayer(np.zeros((2, 2)), np.zeros(2))])
        c = Cascade([clf1, clf2], [pol], [1.0, 2.0])
        ds = Dataset(np.zeros((1, 2)), np.array([0]), 2)
        spec = RewardSpec(alpha=0.0)
        grad = exact_gradient(c, ds, spec)
        # stop-logit bias of the policy head sits at a fixed offset: all
        # classifier params, then policy layer W (2x2) comes before bias
        offset = sum(n.num_params() for n in c.classifiers) + 4
        stop_bias_grad = grad[offset]
        continue_bias_grad = grad[offset + 1]
        assert stop_bias_grad < 0  # stopping less would help
        assert continue_bias_grad > 0
