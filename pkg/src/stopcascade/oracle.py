"""Brute-force reference computations on tiny cascades.

Everything here trades speed for exactness: the objective is enumerated
over all stop stages and all labels, its gradient is computed twice along
independent routes (analytic backward chaining vs. central finite
differences), and the sampled estimator is checked against them. Guards
keep these tools on desk-sized instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .cascade import (
    LOG_LOSS,
    compute_reward,
    assign_param_vector,
    flatten_grad_dict,
    param_block_slices,
    param_vector,
    run_rollout,
    selection_distribution,
    write_grads_into,
)
from .errors import ConfigError, SizeGuardError
from .nn import (
    PROB_FLOOR,
    accumulate_grads,
    net_backward,
    net_forward,
    softmax_vjp,
    zeros_grads,
)
from .training import reward_path_gradient, trajectory_score

ENUM_TERM_GUARD = 10 ** 6


def _guard(cascade, dataset):
    terms = cascade.depth * cascade.num_classes * dataset.n_samples
    if terms > ENUM_TERM_GUARD:
        raise SizeGuardError(
            f"enumeration would touch {terms} terms (> {ENUM_TERM_GUARD}); "
            "use a smaller instance"
        )


@dataclass
class ExactObjectiveReport:
    """Exact expected return, with the per-sample pieces kept for audit."""

    objective: float
    per_sample_expected_reward: np.ndarray  # (n,)
    per_sample_selection: np.ndarray  # (n, K)
    expected_cost: float  # normalized, all visited stages charged
    expected_raw_flops: float


def _forward_all(cascade, x):
    """Observations and stop probabilities for one input, with caches."""
    obs, clf_caches = [], []
    pol_probs, pol_caches = [], []
    for t in range(cascade.depth):
        probs, cache = net_forward(cascade.classifiers[t], x)
        obs.append(probs)
        clf_caches.append(cache)
        if t < cascade.depth - 1:
            p2, pcache = net_forward(cascade.policies[t], probs)
            pol_probs.append(p2)
            pol_caches.append(pcache)
    stop_probs = np.array([p[0] for p in pol_probs] + [1.0])
    return obs, clf_caches, pol_probs, pol_caches, stop_probs


def _reward_table(cascade, probs_k, k, y, spec):
    """R(k, y_hat) for every candidate label y_hat."""
    return np.array([
        compute_reward(k, probs_k, y_hat, y, cascade, spec)
        for y_hat in range(cascade.num_classes)
    ])


def exact_objective(cascade, dataset, spec):
    """Enumerate the expected return: no sampling anywhere.

    J = mean_x sum_k P(stop at k | x) * sum_yhat C_k(yhat|x) R(k, yhat).
    """
    _guard(cascade, dataset)
    n = dataset.n_samples
    depth = cascade.depth
    per_sample = np.empty(n)
    selections = np.empty((n, depth))
    exp_cost = 0.0
    exp_raw = 0.0
    for i in range(n):
        x = dataset.features[i]
        y = int(dataset.labels[i])
        obs, _, _, _, stop_probs = _forward_all(cascade, x)
        pi = selection_distribution(stop_probs)
        selections[i] = pi
        total = 0.0
        for k in range(1, depth + 1):
            rewards = _reward_table(cascade, obs[k - 1], k, y, spec)
            total += pi[k - 1] * float(obs[k - 1] @ rewards)
        per_sample[i] = total
        exp_cost += float(pi @ cascade.cum_inclusive)
        exp_raw += float(pi @ cascade.cum_raw)
    return ExactObjectiveReport(
        objective=float(per_sample.mean()),
        per_sample_expected_reward=per_sample,
        per_sample_selection=selections,
        expected_cost=exp_cost / n,
        expected_raw_flops=exp_raw / n,
    )


def _selection_partials(stop_probs):
    """d P(stop at k) / d pi_t for t < K, via explicit products.

    Safe at saturated probabilities (no division by 1 - pi).
    """
    p = np.asarray(stop_probs)
    depth = p.size
    out = np.zeros((depth, depth - 1))  # rows k, cols t
    for k in range(depth):
        for t in range(depth - 1):
            if t > k:
                continue
            prod = 1.0
            for s in range(k):
                if s != t:
                    prod *= 1.0 - p[s]
            if t == k:
                out[k, t] = prod
            else:
                out[k, t] = -p[k] * prod
    return out


def exact_gradient(cascade, dataset, spec):
    """Analytic gradient of :func:`exact_objective`, flat layout.

    Chains through everything the enumeration touches: the selection
    probabilities, the policy inputs (classifier outputs), the prediction
    distribution, and in log-loss mode the reward itself.
    """
    _guard(cascade, dataset)
    n = dataset.n_samples
    depth = cascade.depth
    clf_acc = {i: zeros_grads(c) for i, c in enumerate(cascade.classifiers)}
    pol_acc = {i: zeros_grads(p) for i, p in enumerate(cascade.policies)}
    for i in range(n):
        x = dataset.features[i]
        y = int(dataset.labels[i])
        obs, clf_caches, pol_probs, pol_caches, stop_probs = _forward_all(cascade, x)
        pi = selection_distribution(stop_probs)
        reward_tables = [
            _reward_table(cascade, obs[k - 1], k, y, spec)
            for k in range(1, depth + 1)
        ]
        r_k = np.array([float(obs[k] @ reward_tables[k]) for k in range(depth)])
        partials = _selection_partials(stop_probs)
        d_pi = r_k @ partials  # (K-1,)
        d_obs = [None] * depth
        for t in range(depth - 1):
            p2 = pol_probs[t]
            d_p2 = np.array([d_pi[t], 0.0])
            d_logits = softmax_vjp(p2, d_p2)
            g = net_backward(cascade.policies[t], pol_caches[t], d_logits)
            accumulate_grads(pol_acc[t], g, 1.0 / n)
            d_obs[t] = g.wrt_input
        for k in range(depth):
            d_probs = pi[k] * reward_tables[k].copy()
            if spec.loss == LOG_LOSS and obs[k][y] > PROB_FLOOR:
                # r_k = sum_yhat probs[yhat] * (log(probs[y]) - alpha c_k):
                # the reward itself moves with probs[y].
                d_probs[y] += pi[k] / obs[k][y]
            if d_obs[k] is not None:
                d_probs = d_probs + d_obs[k]
            d_logits = softmax_vjp(obs[k], d_probs)
            g = net_backward(cascade.classifiers[k], clf_caches[k], d_logits)
            accumulate_grads(clf_acc[k], g, 1.0 / n)
    return flatten_grad_dict(cascade, clf_acc, pol_acc)


def fd_component(cascade, dataset, spec, index, eps):
    """Central-difference derivative of the objective w.r.t. one parameter."""
    theta = param_vector(cascade)
    bumped = theta.copy()
    bumped[index] = theta[index] + eps
    assign_param_vector(cascade, bumped)
    j_plus = exact_objective(cascade, dataset, spec).objective
    bumped[index] = theta[index] - eps
    assign_param_vector(cascade, bumped)
    j_minus = exact_objective(cascade, dataset, spec).objective
    assign_param_vector(cascade, theta)
    return (j_plus - j_minus) / (2.0 * eps)


def exact_gradient_fd(cascade, dataset, spec, eps=1e-6):
    """Finite-difference gradient over every parameter (the slow route)."""
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"eps={eps} outside the supported range [1e-7, 1e-4]")
    _guard(cascade, dataset)
    theta = param_vector(cascade)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        grad[j] = fd_component(cascade, dataset, spec, j, eps)
    return grad


@dataclass
class BiasCheckReport:
    z_scores: np.ndarray  # NaN where excluded
    max_abs_z: float
    excluded: list  # zero-variance component indices
    n_rollouts: int
    reference_gradient: np.ndarray
    mean_estimate: np.ndarray


def estimator_bias_check(cascade, dataset, spec, n_rollouts, seed,
                         baseline=0.0, reference=None):
    """Compare the sampled estimator's mean against the FD gradient.

    Rollouts visit the dataset round-robin (the count is rounded up to a
    full number of passes so the sample average matches the objective's
    mean over the dataset). ``baseline`` must be a constant here; a batch-
    fitted value would correlate with the rollouts and bias the check.
    """
    if n_rollouts < 1:
        raise ConfigError("need at least one rollout")
    n = dataset.n_samples
    per_pass = n
    passes = -(-int(n_rollouts) // per_pass)
    total = passes * per_pass
    if reference is None:
        reference = exact_gradient_fd(cascade, dataset, spec)
    dim = reference.size
    running_sum = np.zeros(dim)
    running_sq = np.zeros(dim)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB1A5]))
    clf_slices, pol_slices, param_total = param_block_slices(cascade)
    if param_total != dim:
        raise ConfigError("reference gradient length does not match the cascade")
    # Same math as averaging sample_gradient vectors, without re-allocating
    # a fresh flat vector per rollout.
    v = np.zeros(dim)
    for _ in range(passes):
        for i in range(n):
            ro = run_rollout(cascade, dataset.features[i],
                             int(dataset.labels[i]), rng, spec)
            clf_s, pol_s = trajectory_score(cascade, ro)
            adv = ro.reward - baseline
            v[:] = 0.0
            for grads, slices in ((clf_s, clf_slices), (pol_s, pol_slices)):
                for j, g in grads.items():
                    write_grads_into(v, slices[j], g, adv)
            extra = reward_path_gradient(cascade, ro, spec)
            if extra is not None:
                for (w_sl, b_sl), dw, db in zip(clf_slices[ro.stop_index - 1],
                                                extra.d_weights, extra.d_biases):
                    v[w_sl] += dw.reshape(-1)
                    v[b_sl] += db
            running_sum += v
            running_sq += v * v
    mean = running_sum / total
    var = running_sq / total - mean * mean
    var = np.maximum(var, 0.0)
    se = np.sqrt(var / total)
    z = np.full(dim, np.nan)
    excluded = []
    for j in range(dim):
        if se[j] < 1e-15:
            excluded.append(j)
        else:
            z[j] = (mean[j] - reference[j]) / se[j]
    finite = z[~np.isnan(z)]
    max_abs = float(np.abs(finite).max()) if finite.size else 0.0
    return BiasCheckReport(z, max_abs, excluded, total, reference, mean)


def path_enumeration_check(stop_probs):
    """Selection distribution by explicit enumeration of decision strings.

    Walks all 2^(K-1) stop/continue sequences, weighting each by its full
    product of decision probabilities, and groups mass by the first stop.
    Must agree with :func:`selection_distribution`.
    """
    p = np.asarray(stop_probs, dtype=np.float64)
    depth = p.size
    if depth > 20:
        raise SizeGuardError(f"K={depth} too deep to enumerate 2^(K-1) paths")
    if depth == 0:
        raise ConfigError("empty stop-probability vector")
    out = np.zeros(depth)
    for decisions in itertools.product((True, False), repeat=depth - 1):
        weight = 1.0
        stop_at = depth
        for t, stopped in enumerate(decisions):
            weight *= p[t] if stopped else 1.0 - p[t]
        for t, stopped in enumerate(decisions):
            if stopped:
                stop_at = t + 1
                break
        out[stop_at - 1] += weight
    return out
