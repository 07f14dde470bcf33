"""Score-function training of the cascade and its stopping policies.

The estimator multiplies the gradient of the realized trajectory's
log-likelihood (continue decisions, the stop decision, and the sampled
prediction) by the advantage ``R - b``. Because each stopping policy reads
the classifier's probability output, the trajectory likelihood depends on
classifier parameters both through the prediction term and through the
policy inputs; both chains are included, which is what makes the estimator
agree with the enumerated objective's gradient in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .cascade import (
    INCLUSIVE,
    LOG_LOSS,
    ZERO_ONE,
    RewardSpec,
    flatten_grad_dict,
    run_rollout,
)
from .errors import CalibrationError, ConfigError, ContractViolation, NumericError
from .nn import (
    PROB_FLOOR,
    accumulate_grads,
    make_sgd_state,
    net_backward,
    net_forward_batch,
    sgd_momentum_step,
    softmax_vjp,
    zeros_grads,
)

JOINT = "joint"
SIMPLIFIED = "simplified"
MODES = (JOINT, SIMPLIFIED)


@dataclass
class TrainConfig:
    """Knobs for one training run; every field has a stable config key."""

    alpha: float
    epochs: int
    batch_size: int = 128
    classifier_lr: float = 0.01
    classifier_lr_drops: tuple = (0.5, 0.75)  # fractions of epochs, x0.1 each
    policy_lr: float = 0.05
    policy_lr_decay: float = 0.9
    policy_lr_decay_every: int = 2
    momentum: float = 0.9
    reward_loss: str = ZERO_ONE
    cost_convention: str = INCLUSIVE
    mode: str = JOINT
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.classifier_lr <= 0 or self.policy_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.policy_lr_decay <= 1:
            raise ConfigError("policy_lr_decay must be in (0, 1]")
        if self.policy_lr_decay_every <= 0:
            raise ConfigError("policy_lr_decay_every must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        # Reuse the RewardSpec validation for the loss/convention enums.
        RewardSpec(self.alpha, self.reward_loss, self.cost_convention)

    def reward_spec(self):
        return RewardSpec(self.alpha, self.reward_loss, self.cost_convention)

    def classifier_lr_at(self, epoch):
        lr = self.classifier_lr
        for frac in self.classifier_lr_drops:
            if epoch >= int(frac * self.epochs):
                lr *= 0.1
        return lr

    def policy_lr_at(self, epoch):
        return self.policy_lr * self.policy_lr_decay ** (epoch // self.policy_lr_decay_every)


@dataclass
class GradEstimate:
    """One sampled gradient-ascent estimate from a single rollout.

    Networks past the stop index are untouched and simply absent from the
    dicts (their gradient is identically zero).
    """

    classifier_grads: dict
    policy_grads: dict
    reward: float
    baseline: float

    def to_vector(self, cascade):
        return flatten_grad_dict(cascade, self.classifier_grads, self.policy_grads)


def _check_fresh(cascade, rollout):
    if rollout.param_version != cascade.param_version():
        raise ContractViolation(
            "stale rollout: cascade parameters changed since it was sampled"
        )


def trajectory_score(cascade, rollout, with_classifiers=True):
    """Gradient of the realized trajectory's log-likelihood (unscaled).

    Returns ``(classifier_grads, policy_grads)`` dicts keyed by 0-based
    net index. The policy-input chain pushes gradient into every visited
    classifier, not just the one that predicted.
    """
    _check_fresh(cascade, rollout)
    k = rollout.stop_index
    depth = cascade.depth
    n_policy_steps = min(k, depth - 1)
    policy_grads = {}
    d_obs = {}
    for t in range(1, n_policy_steps + 1):
        p2 = rollout.policy_probs[t - 1]
        choice = 0 if t == k else 1  # entry 0 stops, entry 1 continues
        d_logits = -p2.copy()
        d_logits[choice] += 1.0
        g = net_backward(cascade.policies[t - 1], rollout.policy_caches[t - 1], d_logits)
        policy_grads[t - 1] = g
        d_obs[t - 1] = g.wrt_input
    classifier_grads = {}
    if with_classifiers:
        for t in range(1, k + 1):
            probs_t = rollout.observations[t - 1]
            d_probs = d_obs.get(t - 1)
            d_logits = softmax_vjp(probs_t, d_probs) if d_probs is not None else None
            if t == k:
                pred = -probs_t.copy()
                pred[rollout.sampled_label] += 1.0
                d_logits = pred if d_logits is None else d_logits + pred
            if d_logits is None:
                continue
            classifier_grads[t - 1] = net_backward(
                cascade.classifiers[t - 1], rollout.classifier_caches[t - 1], d_logits
            )
    return classifier_grads, policy_grads


def reward_path_gradient(cascade, rollout, spec):
    """Direct gradient of the reward through the stopped classifier.

    Only the log loss depends on parameters: R contains log(probs[y]),
    so d(R)/d(logits) = onehot(y) - probs unless the floor clipped it.
    """
    if spec.loss != LOG_LOSS:
        return None
    probs_k = rollout.observations[rollout.stop_index - 1]
    if probs_k[rollout.true_label] <= PROB_FLOOR:
        return None
    d_logits = -probs_k.copy()
    d_logits[rollout.true_label] += 1.0
    return net_backward(
        cascade.classifiers[rollout.stop_index - 1],
        rollout.classifier_caches[rollout.stop_index - 1],
        d_logits,
    )


def sample_gradient(cascade, rollout, baseline, spec, with_classifiers=True):
    """Ascent-direction estimate: score * (R - baseline), plus the direct
    reward term in log-loss mode."""
    clf_score, pol_score = trajectory_score(cascade, rollout, with_classifiers)
    adv = rollout.reward - baseline
    clf = {i: g.scaled(adv) for i, g in clf_score.items()}
    pol = {i: g.scaled(adv) for i, g in pol_score.items()}
    if with_classifiers:
        extra = reward_path_gradient(cascade, rollout, spec)
        if extra is not None:
            idx = rollout.stop_index - 1
            if idx in clf:
                accumulate_grads(clf[idx], extra, 1.0)
            else:
                clf[idx] = extra
    return GradEstimate(clf, pol, rollout.reward, baseline)


def minibatch_baseline(returns, grad_sq_norms):
    """Variance-minimizing constant baseline for the batch.

    b = sum(g_i * R_i) / sum(g_i) with g_i the squared norm of the i-th
    trajectory's log-likelihood gradient; falls back to the plain mean
    when the weights vanish.
    """
    if len(returns) == 0:
        raise ConfigError("baseline needs a non-empty batch")
    if len(returns) != len(grad_sq_norms):
        raise ConfigError("returns and gradient norms must align")
    g = np.asarray(grad_sq_norms, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    denom = g.sum()
    if denom < 1e-12:
        return float(r.mean())
    return float(np.dot(g, r) / denom)


def _score_norm(clf_grads, pol_grads, trainable_classifiers):
    total = 0.0
    if trainable_classifiers:
        for g in clf_grads.values():
            total += g.sq_norm()
    for g in pol_grads.values():
        total += g.sq_norm()
    return total


def pretrain_classifiers(cascade, dataset, epochs, lr=0.01, momentum=0.9,
                         batch_size=128, seed=0, lr_drops=(0.5, 0.75)):
    """Supervised warm-up: each classifier independently minimizes
    cross-entropy over the training set by minibatch SGD. Policies are
    untouched. Returns per-classifier, per-epoch (loss, accuracy) logs.
    """
    logs = []
    onehot = np.eye(cascade.num_classes)
    for ci, clf in enumerate(cascade.classifiers):
        state = make_sgd_state(clf)
        rows = []
        for epoch in range(epochs):
            lr_e = lr
            for frac in lr_drops:
                if epoch >= int(frac * epochs):
                    lr_e *= 0.1
            total_loss = 0.0
            total_correct = 0
            for idx in data_mod.batch_indices(dataset.n_samples, batch_size,
                                              seed=(seed, 0xC1F, ci), epoch=epoch):
                xb = dataset.features[idx]
                yb = dataset.labels[idx]
                probs, cache = net_forward_batch(clf, xb)
                picked = np.clip(probs[np.arange(len(idx)), yb], PROB_FLOOR, None)
                loss = -np.log(picked).mean()
                if not np.isfinite(loss):
                    raise NumericError(f"classifier {ci} diverged at epoch {epoch}")
                total_loss += loss * len(idx)
                total_correct += int((np.argmax(probs, axis=1) == yb).sum())
                d_logits = (probs - onehot[yb]) / len(idx)
                grads = net_backward(clf, cache, d_logits)
                sgd_momentum_step(clf, grads, lr_e, momentum, state)
            rows.append({
                "classifier": ci + 1,
                "epoch": epoch + 1,
                "loss": total_loss / dataset.n_samples,
                "accuracy": total_correct / dataset.n_samples,
            })
        logs.append(rows)
    return logs


def train(cascade, dataset, config):
    """Joint (or policy-only) training loop; returns per-epoch metrics.

    Every sample in every minibatch is rolled out, the batch baseline is
    fit, and the averaged ascent estimates are applied through the shared
    momentum optimizer (classifiers frozen in simplified mode). Metrics
    are running training-rollout statistics, reproducible per seed.
    """
    spec = config.reward_spec()
    depth = cascade.depth
    train_clf = config.mode == JOINT
    clf_states = [make_sgd_state(c) for c in cascade.classifiers]
    pol_states = [make_sgd_state(p) for p in cascade.policies]
    metrics = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(config.seed), 0x7017, epoch]))
        clf_lr = config.classifier_lr_at(epoch)
        pol_lr = config.policy_lr_at(epoch)
        reward_sum = 0.0
        correct = 0
        raw_flops_sum = 0.0
        stop_counts = np.zeros(depth, dtype=np.int64)
        baseline_sum = 0.0
        n_batches = 0
        n_seen = 0
        for idx in data_mod.batch_indices(dataset.n_samples, config.batch_size,
                                          seed=(config.seed, 0xBA7C), epoch=epoch):
            rollouts = []
            scores = []
            returns = []
            norms = []
            for i in idx:
                ro = run_rollout(cascade, dataset.features[i],
                                 int(dataset.labels[i]), rng, spec)
                clf_s, pol_s = trajectory_score(cascade, ro, with_classifiers=train_clf)
                rollouts.append(ro)
                scores.append((clf_s, pol_s))
                returns.append(ro.reward)
                norms.append(_score_norm(clf_s, pol_s, train_clf))
                reward_sum += ro.reward
                correct += ro.sampled_label == ro.true_label
                raw_flops_sum += ro.visited_raw_flops
                stop_counts[ro.stop_index - 1] += 1
            b = minibatch_baseline(returns, norms)
            baseline_sum += b
            n_batches += 1
            n_seen += len(idx)
            scale = -1.0 / len(idx)  # ascent via negated descent step
            clf_acc = {i: zeros_grads(c) for i, c in enumerate(cascade.classifiers)} \
                if train_clf else {}
            pol_acc = {i: zeros_grads(p) for i, p in enumerate(cascade.policies)}
            for ro, (clf_s, pol_s) in zip(rollouts, scores):
                adv = ro.reward - b
                for i, g in pol_s.items():
                    accumulate_grads(pol_acc[i], g, scale * adv)
                if train_clf:
                    for i, g in clf_s.items():
                        accumulate_grads(clf_acc[i], g, scale * adv)
                    extra = reward_path_gradient(cascade, ro, spec)
                    if extra is not None:
                        accumulate_grads(clf_acc[ro.stop_index - 1], extra, scale)
            for i, pol in enumerate(cascade.policies):
                sgd_momentum_step(pol, pol_acc[i], pol_lr, config.momentum,
                                  pol_states[i])
            if train_clf:
                for i, clf in enumerate(cascade.classifiers):
                    sgd_momentum_step(clf, clf_acc[i], clf_lr, config.momentum,
                                      clf_states[i])
            for net in cascade.all_nets():
                net.check_finite()
        row = {
            "epoch": epoch + 1,
            "mean_reward": reward_sum / max(n_seen, 1),
            "accuracy": correct / max(n_seen, 1),
            "amortized_flops": raw_flops_sum / max(n_seen, 1),
            "baseline_value": baseline_sum / max(n_batches, 1),
        }
        hist = stop_counts / max(n_seen, 1)
        for kk in range(depth):
            row[f"stop_histogram_{kk + 1}"] = hist[kk]
        metrics.append(row)
    return metrics


@dataclass
class CalibrationResult:
    alpha: float
    achieved_cost: float
    trace: list
    converged: bool


def calibrate_alpha(run_fn, budget, tolerance, bracket, max_iters=12,
                    cost_floor=None, cost_ceiling=None):
    """Bisect log(alpha) until the trained model's normalized amortized
    cost lands within ``tolerance`` of the budget.

    ``run_fn(alpha)`` trains from a fixed starting point and returns the
    achieved normalized cost. The bracket must straddle the budget: cost
    above it at the low end, below at the high end.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0 < lo < hi):
        raise CalibrationError(f"bad alpha bracket ({lo}, {hi})")
    if cost_floor is not None and budget < cost_floor:
        raise CalibrationError(
            f"budget {budget} is below the cheapest stage cost {cost_floor}")
    trace = []

    def measure(alpha):
        cost = float(run_fn(alpha))
        trace.append({"iteration": len(trace) + 1, "alpha": alpha, "cost": cost})
        return cost

    if cost_ceiling is not None and budget >= cost_ceiling:
        # Constraint inactive; the mildest penalty in the bracket wins.
        cost = measure(lo)
        return CalibrationResult(lo, cost, trace, converged=True)
    cost_lo = measure(lo)
    if abs(cost_lo - budget) <= tolerance:
        return CalibrationResult(lo, cost_lo, trace, converged=True)
    cost_hi = measure(hi)
    if abs(cost_hi - budget) <= tolerance:
        return CalibrationResult(hi, cost_hi, trace, converged=True)
    if not (cost_lo > budget > cost_hi):
        raise CalibrationError(
            f"bracket does not straddle the budget: cost({lo})={cost_lo}, "
            f"cost({hi})={cost_hi}, budget={budget}")
    best_alpha, best_cost = hi, cost_hi
    for _ in range(max_iters):
        mid = float(np.exp(0.5 * (np.log(lo) + np.log(hi))))
        cost_mid = measure(mid)
        if abs(cost_mid - budget) <= tolerance:
            return CalibrationResult(mid, cost_mid, trace, converged=True)
        if cost_mid > budget:
            lo = mid
        else:
            hi = mid
            if cost_mid > best_cost:  # feasible and closer to the budget
                best_alpha, best_cost = mid, cost_mid
    return CalibrationResult(best_alpha, best_cost, trace, converged=False)
