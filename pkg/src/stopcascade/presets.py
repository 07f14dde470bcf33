"""Pinned reference setups used by the gradient checks and the scaled
trade-off experiment. Everything here is deterministic so results can be
compared across machines and runs.
"""

from __future__ import annotations

from .cascade import RewardSpec, build_cascade
from .data import TierSpec, generate_tiered
from .training import TrainConfig

# --- tiny instance: small enough for full enumeration and FD sweeps ------

TINY_SEED = 11
TINY_DATA_SEED = 5
TINY_ALPHA = 0.05


def tiny_cascade(seed=TINY_SEED):
    """Three 4->8->2 classifiers with an explicit 1:2:4 cost schedule."""
    return build_cascade(
        input_dim=4,
        num_classes=2,
        classifier_hidden=[[8], [8], [8]],
        policy_hidden=4,
        seed=seed,
        stage_costs=[1.0, 2.0, 4.0],
    )


def tiny_dataset(n_per_tier=10, seed=TINY_DATA_SEED):
    """Two-tier 4-d binary dataset with genuine class overlap."""
    spec = TierSpec(
        num_tiers=2,
        separations=(2.5, 1.0),
        noise_rates=(0.0, 0.1),
        samples_per_tier=(n_per_tier, n_per_tier),
        feature_dim=4,
        num_classes=2,
        seed=seed,
    )
    return generate_tiered(spec)


def tiny_reward_spec(alpha=TINY_ALPHA):
    return RewardSpec(alpha=alpha)


# --- scaled trade-off experiment -----------------------------------------

FRONTIER_DATA_SEED = 20260809
FRONTIER_CASCADE_SEED = 97


def frontier_tier_spec(seed=FRONTIER_DATA_SEED):
    """Three difficulty tiers over 16-d features, four classes.

    Tier 0 is a single well-separated cluster per class (a linear model
    suffices); tier 1 splits every class into an antipodal cluster pair
    (breaks linear models); tier 2 uses four modes per class with higher
    label noise (needs the widest classifier, and caps achievable
    accuracy). Most samples are easy, mirroring natural workloads.
    """
    return TierSpec(
        num_tiers=3,
        separations=(6.0, 4.5, 4.0),
        noise_rates=(0.0, 0.02, 0.05),
        samples_per_tier=(1800, 720, 480),
        feature_dim=16,
        num_classes=4,
        seed=seed,
        modes_per_class=(1, 2, 4),
    )


def frontier_dataset(seed=FRONTIER_DATA_SEED):
    return generate_tiered(frontier_tier_spec(seed))


def frontier_cascade(seed=FRONTIER_CASCADE_SEED):
    """Narrow / medium / wide classifiers with raw costs near 1:4:16.

    All three are competent (single hidden layer); width decides how many
    cluster modes they can carve, so stage accuracy gaps stay in the
    few-points range where the cost weight sweep actually bites.
    """
    return build_cascade(
        input_dim=16,
        num_classes=4,
        classifier_hidden=[[6], [24], [97]],
        policy_hidden=8,
        seed=seed,
        stage_costs="model",
    )


FRONTIER_SEED = 42
FRONTIER_EVAL_SEED = 123
FRONTIER_PRETRAIN = dict(epochs=60, lr=0.05, batch_size=128,
                         seed=FRONTIER_SEED)
FRONTIER_ALPHA = 0.25


def frontier_train_config(alpha=FRONTIER_ALPHA):
    """Joint fine-tuning config for the headline trade-off run.

    The cost weight sits where the enumerated objective's per-sample
    stop-advantage at stage 1 is positive for the easy tier and negative
    for the hard tiers; gentle policy steps keep the stop decisions away
    from saturation long enough for the confidence features to form.
    """
    return TrainConfig(
        alpha=alpha,
        epochs=100,
        batch_size=256,
        classifier_lr=0.005,
        policy_lr=0.02,
        policy_lr_decay_every=25,
        seed=FRONTIER_SEED,
    )


def sweep_train_config(alpha):
    """Policy-only config for the cost-weight sweep.

    Short on purpose: runs are stopped while the stop decisions are still
    interior, where the drift toward deeper stages shrinks monotonically
    with the cost weight. Fully converged runs at these small weights all
    saturate at the same deep assignment and stop responding; the large
    batch keeps trajectory noise below the systematic spacing between
    adjacent weights.
    """
    return TrainConfig(
        alpha=alpha,
        epochs=40,
        batch_size=512,
        policy_lr=0.05,
        policy_lr_decay_every=25,
        mode="simplified",
        seed=FRONTIER_SEED,
    )
