"""The classifier cascade and its sequential stopping process.

A cascade holds K classifiers of increasing cost and K-1 stopping policies.
Inference walks the cascade front to back: at stage t the classifier's
class-probability output is both the observation fed to the stopping policy
and, if we stop, the predictive distribution. The final stage always stops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .nn import (
    build_net,
    net_forward,
    net_forward_batch,
)

ZERO_ONE = "zero_one"
LOG_LOSS = "log"
LOSS_KINDS = (ZERO_ONE, LOG_LOSS)

INCLUSIVE = "inclusive"
EXCLUSIVE = "exclusive"
COST_CONVENTIONS = (INCLUSIVE, EXCLUSIVE)

# Per-stage forward FLOPs of published reference cascades, usable as an
# explicit stage-cost schedule (values in raw FLOPs).
COST_PRESETS = {
    "cifar-resnet": [14_860_000, 43_170_000, 71_480_000, 128_110_000, 255_510_000],
    "imagenet32-wide": [85_640_000, 192_360_000, 341_680_000, 768_130_000, 1_364_970_000],
}

DEFAULT_POLICY_HIDDEN = 64


@dataclass
class RewardSpec:
    """How a stopped trajectory is scored: loss kind, cost weight, cost sum.

    ``inclusive`` charges every visited stage (sum over t <= k);
    ``exclusive`` charges only the stages before the stop (t <= k-1).
    """

    alpha: float
    loss: str = ZERO_ONE
    cost_convention: str = INCLUSIVE

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown reward loss {self.loss!r}")
        if self.cost_convention not in COST_CONVENTIONS:
            raise ConfigError(f"unknown cost convention {self.cost_convention!r}")


class Cascade:
    """K classifiers, K-1 stopping policies, and their cost schedule.

    ``raw_stage_costs[k]`` is the raw FLOPs charged when stage k runs
    (classifier plus its policy module, or an explicit override);
    ``stage_costs`` is the same schedule normalized by its maximum.
    """

    def __init__(self, classifiers, policies, raw_stage_costs, cost_basis="model"):
        classifiers = list(classifiers)
        policies = list(policies)
        if not classifiers:
            raise ConfigError("cascade needs at least one classifier")
        if len(policies) != len(classifiers) - 1:
            raise ConfigError("need exactly K-1 stopping policies")
        num_classes = classifiers[0].num_classes
        for i, clf in enumerate(classifiers):
            if clf.num_classes != num_classes:
                raise ConfigError(f"classifier {i} disagrees on the class count")
        for i, pol in enumerate(policies):
            if pol.in_dim != num_classes or pol.num_classes != 2:
                raise ConfigError(
                    f"policy {i} must map {num_classes} class probabilities "
                    "to a 2-way stop/continue distribution"
                )
        costs = np.asarray(raw_stage_costs, dtype=np.float64)
        if costs.shape != (len(classifiers),):
            raise ConfigError("stage cost schedule length must equal K")
        if not (costs > 0).all():
            raise ConfigError("stage costs must be positive")
        if len(costs) > 1 and not (np.diff(costs) > 0).all():
            raise ConfigError("stage costs must be strictly increasing")
        self.classifiers = classifiers
        self.policies = policies
        self.num_classes = num_classes
        self.raw_stage_costs = costs
        self.cost_basis = cost_basis
        self.stage_costs = costs / costs.max()
        # Cumulative normalized cost of stopping at stage k (1-based k).
        self.cum_inclusive = np.cumsum(self.stage_costs)
        self.cum_exclusive = self.cum_inclusive - self.stage_costs
        self.cum_raw = np.cumsum(costs)

    @property
    def depth(self):
        return len(self.classifiers)

    def all_nets(self):
        return self.classifiers + self.policies

    def param_version(self):
        return tuple(net.version for net in self.all_nets())

    def copy(self):
        return Cascade(
            [c.copy() for c in self.classifiers],
            [p.copy() for p in self.policies],
            self.raw_stage_costs.copy(),
            self.cost_basis,
        )

    def restore_from(self, other):
        """Copy parameters (and versions) from a structurally equal cascade."""
        mine, theirs = self.all_nets(), other.all_nets()
        if len(mine) != len(theirs):
            raise ConfigError("cascades have different network counts")
        for dst, src in zip(mine, theirs):
            if [(l.in_dim, l.out_dim, l.activation) for l in dst.layers] != \
                    [(l.in_dim, l.out_dim, l.activation) for l in src.layers]:
                raise ConfigError("cascade checkpoint has mismatched layer shapes")
            for dl, sl in zip(dst.layers, src.layers):
                dl.weights[...] = sl.weights
                dl.bias[...] = sl.bias
            dst.version = src.version

    def cost_of_stop(self, k, convention=INCLUSIVE):
        """Normalized accumulated cost of stopping at 1-based stage k."""
        if convention == INCLUSIVE:
            return float(self.cum_inclusive[k - 1])
        if convention == EXCLUSIVE:
            return float(self.cum_exclusive[k - 1])
        raise ConfigError(f"unknown cost convention {convention!r}")


def build_cascade(input_dim, num_classes, classifier_hidden, policy_hidden=DEFAULT_POLICY_HIDDEN,
                  seed=0, stage_costs="model"):
    """Construct a cascade of fully-connected classifiers plus policies.

    ``classifier_hidden`` lists the hidden widths per classifier (an empty
    list makes a linear classifier). ``stage_costs`` is either ``"model"``
    (classifier FLOPs plus its policy's FLOPs), a preset name from
    COST_PRESETS, or an explicit schedule of total per-stage costs.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    specs = [list(h) for h in classifier_hidden]
    if not specs:
        raise ConfigError("need at least one classifier")
    k = len(specs)
    seeds = np.random.SeedSequence(seed).spawn(2 * k - 1)
    classifiers = [
        build_net([input_dim, *hidden, num_classes], seeds[i])
        for i, hidden in enumerate(specs)
    ]
    policies = [
        build_net([num_classes, policy_hidden, policy_hidden, 2], seeds[k + i])
        for i in range(k - 1)
    ]
    if isinstance(stage_costs, str) and stage_costs != "model":
        if stage_costs not in COST_PRESETS:
            raise ConfigError(f"unknown cost preset {stage_costs!r}")
        raw = COST_PRESETS[stage_costs][:k]
        if len(raw) < k:
            raise ConfigError(f"preset {stage_costs!r} covers only {len(raw)} stages")
        basis = stage_costs
    elif isinstance(stage_costs, str):  # "model"
        raw = [
            clf.flops + (policies[i].flops if i < k - 1 else 0)
            for i, clf in enumerate(classifiers)
        ]
        basis = "model"
    else:
        raw = list(stage_costs)
        if len(raw) != k:
            raise ConfigError("explicit stage cost schedule length must equal K")
        basis = "explicit"
    return Cascade(classifiers, policies, raw, basis)


def observe(cascade, t, x):
    """Observation at 1-based stage t: the classifier's class probabilities."""
    if not 1 <= t <= cascade.depth:
        raise ConfigError(f"stage {t} out of range 1..{cascade.depth}")
    probs, _ = net_forward(cascade.classifiers[t - 1], x)
    return probs


def stop_probability(cascade, t, s_t):
    """Probability of halting at stage t given its observation.

    Entry 0 of the policy's 2-way softmax is the stop probability; the
    final stage always stops.
    """
    if not 1 <= t <= cascade.depth:
        raise ConfigError(f"stage {t} out of range 1..{cascade.depth}")
    if t == cascade.depth:
        return 1.0
    probs, _ = net_forward(cascade.policies[t - 1], s_t)
    return float(probs[0])


def selection_distribution(stop_probs):
    """Stage-selection probabilities from per-stage stop probabilities.

    P(stop at k) = stop_probs[k] * prod_{t<k} (1 - stop_probs[t]); the last
    entry must be exactly 1 so the result sums to one.
    """
    p = np.asarray(stop_probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractViolation("stop probabilities must be a non-empty vector")
    if ((p < 0) | (p > 1)).any():
        raise ContractViolation("stop probabilities must lie in [0, 1]")
    if p[-1] != 1.0:
        raise ContractViolation("final stage must stop with probability 1")
    out = np.empty_like(p)
    carry = 1.0
    for t in range(p.size):
        out[t] = p[t] * carry
        carry *= 1.0 - p[t]
    return out


def prediction_loss(probs, y_hat, y_true, kind):
    """The per-sample loss L(y_hat, y_true) entering the reward."""
    if kind == ZERO_ONE:
        return 0.0 if y_hat == y_true else 1.0
    if kind == LOG_LOSS:
        from .nn import cross_entropy

        return cross_entropy(probs, y_true)
    raise ConfigError(f"unknown reward loss {kind!r}")


def compute_reward(k, probs_k, y_hat, y_true, cascade, spec):
    """R = -loss - alpha * accumulated stage cost, per the spec's convention."""
    loss = prediction_loss(probs_k, y_hat, y_true, spec.loss)
    cost = cascade.cost_of_stop(k, spec.cost_convention)
    return -loss - spec.alpha * cost


def stage_cost_sum(stage_costs, k, convention):
    """Accumulated cost of stopping at 1-based stage k over a raw schedule."""
    if convention == INCLUSIVE:
        upper = k
    elif convention == EXCLUSIVE:
        upper = k - 1
    else:
        raise ConfigError(f"unknown cost convention {convention!r}")
    return float(np.sum(np.asarray(stage_costs, dtype=np.float64)[:upper]))


@dataclass
class Rollout:
    """One sampled pass through the cascade for a single input."""

    stop_index: int  # 1-based stage where we stopped
    observations: list  # class-probability vectors, one per visited stage
    stop_probs: list  # pi_t for each visited stage (1.0 forced at the end)
    sampled_label: int
    true_label: int
    reward: float
    visited_cost: float  # normalized inclusive cost of the visited prefix
    visited_raw_flops: float  # raw FLOPs actually spent
    param_version: tuple
    classifier_caches: list = field(repr=False, default_factory=list)
    policy_caches: list = field(repr=False, default_factory=list)
    policy_probs: list = field(repr=False, default_factory=list)


def _sample_index(rng, probs):
    u = rng.random()
    c = 0.0
    for i, p in enumerate(probs):
        c += p
        if u < c:
            return i
    return len(probs) - 1


def run_rollout(cascade, x, y, rng, spec, sample_label=True, stop_rule="sample"):
    """Walk the cascade once: sample stop/continue, then predict at the stop.

    ``sample_label=True`` draws the prediction from the stopped classifier
    (training semantics); ``False`` takes the argmax (evaluation).
    ``stop_rule`` is ``"sample"`` (draw against pi_t) or ``"threshold"``
    (stop when pi_t >= 0.5). Classifiers past the stop are never run.
    """
    version = cascade.param_version()
    observations = []
    stop_probs = []
    clf_caches = []
    pol_caches = []
    pol_probs = []
    depth = cascade.depth
    k = depth
    for t in range(1, depth + 1):
        probs, cache = net_forward(cascade.classifiers[t - 1], x)
        observations.append(probs)
        clf_caches.append(cache)
        if t < depth:
            p2, pcache = net_forward(cascade.policies[t - 1], probs)
            pol_caches.append(pcache)
            pol_probs.append(p2)
            pi = float(p2[0])
            stop_probs.append(pi)
            if stop_rule == "sample":
                stopped = rng.random() < pi
            elif stop_rule == "threshold":
                stopped = pi >= 0.5
            else:
                raise ConfigError(f"unknown stop rule {stop_rule!r}")
            if stopped:
                k = t
                break
        else:
            stop_probs.append(1.0)
    probs_k = observations[k - 1]
    if sample_label:
        y_hat = _sample_index(rng, probs_k)
    else:
        y_hat = int(np.argmax(probs_k))
    r = compute_reward(k, probs_k, y_hat, y, cascade, spec)
    raw = float(cascade.cum_raw[k - 1])
    return Rollout(
        stop_index=k,
        observations=observations,
        stop_probs=stop_probs,
        sampled_label=y_hat,
        true_label=int(y),
        reward=r,
        visited_cost=cascade.cost_of_stop(k, INCLUSIVE),
        visited_raw_flops=raw,
        param_version=version,
        classifier_caches=clf_caches,
        policy_caches=pol_caches,
        policy_probs=pol_probs,
    )


@dataclass
class EvalReport:
    """Cascade quality summary over a dataset.

    ``accuracy_matrix[i, j]`` is the accuracy of classifier i+1 on the
    samples that stopped at stage j+1 (NaN when nothing stopped there);
    ``amortized_flops`` is the mean raw FLOPs actually spent per input.
    """

    accuracy: float
    amortized_flops: float
    assignment_histogram: np.ndarray
    accuracy_matrix: np.ndarray
    assignment_counts: np.ndarray
    n_samples: int
    mean_reward: float
    tier_stop_fractions: dict | None = None


def _eval_rollouts(cascade, dataset, seed, stop_rule, spec):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CA1E]))
    records = []
    for i in range(dataset.n_samples):
        ro = run_rollout(
            cascade, dataset.features[i], int(dataset.labels[i]), rng, spec,
            sample_label=False, stop_rule=stop_rule,
        )
        records.append(ro)
    return records


def evaluate(cascade, dataset, seed=0, stop_rule="sample", spec=None,
             collect_rollouts=False):
    """Deterministic evaluation pass; fills every report field.

    Stopping follows ``stop_rule`` (sampled from a fixed seed by default,
    matching training-time semantics); predictions are argmax at the stop.
    """
    if dataset.n_samples == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if spec is None:
        spec = RewardSpec(alpha=0.0)
    depth = cascade.depth
    records = _eval_rollouts(cascade, dataset, seed, stop_rule, spec)
    counts = np.zeros(depth, dtype=np.int64)
    correct = 0
    total_raw = 0.0
    total_reward = 0.0
    assignments = np.empty(dataset.n_samples, dtype=np.int64)
    for i, ro in enumerate(records):
        counts[ro.stop_index - 1] += 1
        assignments[i] = ro.stop_index - 1
        if ro.sampled_label == ro.true_label:
            correct += 1
        total_raw += ro.visited_raw_flops
        total_reward += ro.reward
    n = dataset.n_samples
    # Full per-classifier predictions for the cross-assignment matrix; this
    # analysis pass runs every classifier and is not part of inference cost.
    matrix = np.full((depth, depth), np.nan)
    preds = np.empty((depth, n), dtype=np.int64)
    for i, clf in enumerate(cascade.classifiers):
        probs, _ = net_forward_batch(clf, dataset.features)
        preds[i] = np.argmax(probs, axis=1)
    for j in range(depth):
        mask = assignments == j
        if not mask.any():
            continue
        for i in range(depth):
            matrix[i, j] = float(np.mean(preds[i][mask] == dataset.labels[mask]))
    tier_fracs = None
    if dataset.tier_tags is not None:
        tier_fracs = {}
        for tier in np.unique(dataset.tier_tags):
            mask = dataset.tier_tags == tier
            hist = np.bincount(assignments[mask], minlength=depth)
            tier_fracs[int(tier)] = hist / hist.sum()
    report = EvalReport(
        accuracy=correct / n,
        amortized_flops=total_raw / n,
        assignment_histogram=counts / n,
        accuracy_matrix=matrix,
        assignment_counts=counts,
        n_samples=n,
        mean_reward=total_reward / n,
        tier_stop_fractions=tier_fracs,
    )
    if collect_rollouts:
        return report, records
    return report


def param_vector(cascade):
    """All parameters flattened: classifiers then policies, W then b per layer."""
    parts = []
    for net in cascade.all_nets():
        for layer in net.layers:
            parts.append(layer.weights.reshape(-1))
            parts.append(layer.bias)
    return np.concatenate(parts)


def assign_param_vector(cascade, vec):
    """Write a flat vector back into the cascade's parameters."""
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for net in cascade.all_nets():
        for layer in net.layers:
            n = layer.weights.size
            layer.weights[...] = vec[offset:offset + n].reshape(layer.weights.shape)
            offset += n
            n = layer.bias.size
            layer.bias[...] = vec[offset:offset + n]
            offset += n
        net.version += 1
    if offset != vec.size:
        raise ContractViolation("parameter vector length mismatch")


def param_block_slices(cascade):
    """Flat-vector slices for every net, in param_vector order.

    Returns ``(classifier_slices, policy_slices, total)`` where each entry
    is a per-net list of (weight_slice, bias_slice) pairs per layer.
    """
    offset = 0
    groups = []
    for nets in (cascade.classifiers, cascade.policies):
        group = []
        for net in nets:
            per_layer = []
            for layer in net.layers:
                w = slice(offset, offset + layer.weights.size)
                offset += layer.weights.size
                b = slice(offset, offset + layer.bias.size)
                offset += layer.bias.size
                per_layer.append((w, b))
            group.append(per_layer)
        groups.append(group)
    return groups[0], groups[1], offset


def write_grads_into(out, slices_per_layer, grads, scale=1.0):
    """Write one net's scaled gradients into a flat buffer at its slices."""
    for (w_sl, b_sl), dw, db in zip(slices_per_layer, grads.d_weights,
                                    grads.d_biases):
        np.multiply(dw.reshape(-1), scale, out=out[w_sl])
        np.multiply(db, scale, out=out[b_sl])


def flatten_grad_dict(cascade, classifier_grads, policy_grads):
    """Assemble per-net gradient dicts into the flat param_vector layout.

    Missing nets contribute zeros (networks past the stop index get none).
    """
    clf_slices, pol_slices, total = param_block_slices(cascade)
    out = np.zeros(total)
    for grads, slices in ((classifier_grads, clf_slices),
                          (policy_grads, pol_slices)):
        for i, g in grads.items():
            write_grads_into(out, slices[i], g)
    return out
