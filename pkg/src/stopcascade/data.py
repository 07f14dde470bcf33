"""Dataset synthesis and ingestion.

The tiered generator builds Gaussian cluster data whose difficulty is
controlled per tier: cluster separation shrinks, label noise grows, and
classes may be split across antipodal cluster modes so that small linear
models genuinely cannot solve the harder tiers. IDX and CSV loaders cover
flat-feature datasets on disk.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Immutable flat-feature dataset; features are float64 rows."""

    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int64, < num_classes
    num_classes: int
    tier_tags: np.ndarray | None = None  # (n,) difficulty tier, 0 = easiest
    split: str = "full"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ConfigError("features must be a non-empty (n, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("labels must align with features")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels out of range for num_classes")
        if not np.isfinite(self.features).all():
            raise ConfigError("features contain non-finite values")
        if self.tier_tags is not None:
            self.tier_tags = np.asarray(self.tier_tags, dtype=np.int64)
            if self.tier_tags.shape != self.labels.shape:
                raise ConfigError("tier tags must cover every sample")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, indices, split):
        return Dataset(
            self.features[indices],
            self.labels[indices],
            self.num_classes,
            None if self.tier_tags is None else self.tier_tags[indices],
            split,
        )


@dataclass
class TierSpec:
    """Recipe for tiered synthetic data.

    Separation must strictly decrease and noise must not decrease across
    tiers (later tiers are harder). ``modes_per_class`` splits a class
    into several antipodally paired Gaussian clusters, which is what makes
    a tier unsolvable for low-capacity (linear) classifiers.
    """

    num_tiers: int
    separations: tuple
    noise_rates: tuple
    samples_per_tier: tuple
    feature_dim: int
    num_classes: int
    seed: int
    modes_per_class: tuple | None = None

    def __post_init__(self):
        t = self.num_tiers
        if t < 1:
            raise ConfigError("need at least one tier")
        if self.modes_per_class is None:
            self.modes_per_class = tuple(1 for _ in range(t))
        for name, seq in (("separations", self.separations),
                          ("noise_rates", self.noise_rates),
                          ("samples_per_tier", self.samples_per_tier),
                          ("modes_per_class", self.modes_per_class)):
            if len(seq) != t:
                raise ConfigError(f"{name} must have {t} entries")
        if any(s <= 0 for s in self.separations):
            raise ConfigError("separations must be positive")
        if t > 1 and not all(a > b for a, b in zip(self.separations, self.separations[1:])):
            raise ConfigError("separations must strictly decrease with tier")
        if any(not 0 <= r < 0.5 for r in self.noise_rates):
            raise ConfigError("noise rates must lie in [0, 0.5)")
        if t > 1 and not all(a <= b for a, b in zip(self.noise_rates, self.noise_rates[1:])):
            raise ConfigError("noise rates must not decrease with tier")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        for n in self.samples_per_tier:
            if n <= 0 or n % self.num_classes != 0:
                raise ConfigError(
                    "samples_per_tier entries must be positive multiples of "
                    "num_classes (classes are balanced per tier)")
        if any(m < 1 for m in self.modes_per_class):
            raise ConfigError("modes_per_class entries must be >= 1")


def _tier_directions(spec):
    """One orthonormal direction per (tier, class, mode pair).

    A single seeded orthogonal basis is sliced across tiers so clusters of
    different tiers never collide; pairs beyond the ambient dimension are
    rejected.
    """
    half_counts = [spec.num_classes * ((m + 1) // 2) for m in spec.modes_per_class]
    if max(half_counts) > spec.feature_dim:
        raise ConfigError(
            "a tier needs more orthogonal cluster directions than feature_dim")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0xD14]))
    basis, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.feature_dim)))
    if sum(half_counts) <= spec.feature_dim:
        offsets = np.concatenate([[0], np.cumsum(half_counts)[:-1]])
        return [basis[:, o:o + c].T for o, c in zip(offsets, half_counts)]
    # Too many clusters for disjoint slices: draw an independent basis per
    # tier (cross-tier collisions become possible but stay unlikely).
    out = []
    for c in half_counts:
        b, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.feature_dim)))
        out.append(b[:, :c].T)
    return out


def generate_tiered(spec):
    """Deterministic tiered Gaussian-cluster dataset (unit-variance noise)."""
    directions = _tier_directions(spec)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x9E4]))
    feats, labels, tags = [], [], []
    for tier in range(spec.num_tiers):
        sep = spec.separations[tier]
        noise = spec.noise_rates[tier]
        modes = spec.modes_per_class[tier]
        half = (modes + 1) // 2
        per_class = spec.samples_per_tier[tier] // spec.num_classes
        dirs = directions[tier]  # (num_classes * half, d)
        for c in range(spec.num_classes):
            mode_ids = rng.integers(0, modes, size=per_class)
            jitter = rng.standard_normal((per_class, spec.feature_dim))
            sign = np.where(mode_ids < half, 1.0, -1.0)
            which = mode_ids % half
            centers = dirs[c * half + which] * sign[:, None] * sep
            feats.append(centers + jitter)
            y = np.full(per_class, c, dtype=np.int64)
            if noise > 0:
                flip = rng.random(per_class) < noise
                shift = rng.integers(1, spec.num_classes, size=per_class)
                y = np.where(flip, (y + shift) % spec.num_classes, y)
            labels.append(y)
            tags.append(np.full(per_class, tier, dtype=np.int64))
    return Dataset(
        np.vstack(feats), np.concatenate(labels), spec.num_classes,
        tier_tags=np.concatenate(tags),
    )


def _read_exact(f, count, path, offset):
    blob = f.read(count)
    if len(blob) != count:
        raise DataFormatError(
            f"{path}: truncated at byte {offset + len(blob)} "
            f"(wanted {count} more bytes)")
    return blob


def _open_maybe_gzip(path):
    try:
        with open(path, "rb") as probe:
            head = probe.read(2)
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot open: {exc}")
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path):
    """Parse a big-endian IDX image/label pair into a flat Dataset.

    Pixels are scaled to [0, 1] and images flattened row-major.
    """
    with _open_maybe_gzip(images_path) as f:
        header = _read_exact(f, 16, images_path, 0)
        magic, n_images, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        pixels = _read_exact(f, n_images * rows * cols, images_path, 16)
        if f.read(1):
            raise DataFormatError(
                f"{images_path}: trailing bytes after byte {16 + len(pixels)}")
    with _open_maybe_gzip(labels_path) as f:
        header = _read_exact(f, 8, labels_path, 0)
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        raw_labels = _read_exact(f, n_labels, labels_path, 8)
    if n_labels != n_images:
        raise DataFormatError(
            f"{labels_path}: {n_labels} labels for {n_images} images")
    if n_images == 0:
        raise DataFormatError(f"{images_path}: empty image set")
    features = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    features = features.reshape(n_images, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    num_classes = max(int(labels.max()) + 1, 2)
    return Dataset(features, labels, num_classes)


@dataclass
class CsvSchema:
    """Expected CSV layout: named feature columns plus one label column.

    When ``classes`` is given, label cells must match one of its entries
    and are mapped to their index; otherwise labels must be non-negative
    integers.
    """

    feature_columns: list
    label_column: str
    classes: list | None = None


def load_csv(path, schema):
    """Parse a headered CSV per the schema; positional errors on bad rows."""
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot open: {exc}")
    with handle as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, no header row")
        missing = [c for c in [*schema.feature_columns, schema.label_column]
                   if c not in header]
        if missing:
            raise DataFormatError(f"{path}: header missing columns {missing}")
        feat_idx = [header.index(c) for c in schema.feature_columns]
        label_idx = header.index(schema.label_column)
        feats, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: line {line_no}: ragged row "
                    f"({len(row)} fields, header has {len(header)})")
            try:
                feats.append([float(row[j]) for j in feat_idx])
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {line_no}: non-numeric feature value")
            cell = row[label_idx]
            if schema.classes is not None:
                if cell not in schema.classes:
                    raise DataFormatError(
                        f"{path}: line {line_no}: unknown label {cell!r}")
                labels.append(schema.classes.index(cell))
            else:
                try:
                    value = int(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: line {line_no}: label {cell!r} is not an integer")
                if value < 0:
                    raise DataFormatError(
                        f"{path}: line {line_no}: negative label {value}")
                labels.append(value)
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if schema.classes is not None:
        num_classes = len(schema.classes)
    else:
        num_classes = max(int(labels.max()) + 1, 2)
    return Dataset(np.asarray(feats, dtype=np.float64), labels, num_classes)


def split_dataset(dataset, train_fraction, seed):
    """Shuffle once and cut into disjoint, covering train/test splits."""
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B117]))
    order = rng.permutation(dataset.n_samples)
    n_train = int(dataset.n_samples * train_fraction)
    if n_train == 0 or n_train == dataset.n_samples:
        raise ConfigError("split leaves one side empty")
    return (dataset.subset(order[:n_train], "train"),
            dataset.subset(order[n_train:], "test"))


def batch_indices(n, batch_size, seed, epoch):
    """Deterministic per-epoch shuffled batches; the last one may be short.

    The shuffle stream is derived from (seed, epoch), so the same seed
    replays the same batch order.
    """
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    if isinstance(seed, (tuple, list)):
        entropy = [int(s) for s in seed]
    else:
        entropy = [int(seed)]
    rng = np.random.default_rng(np.random.SeedSequence(entropy + [int(epoch)]))
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
