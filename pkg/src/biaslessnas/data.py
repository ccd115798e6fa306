"""Grouped datasets, synthetic bias generation, and BGM-driven batching.

The synthetic generator places a smooth spatial bump per (group, class) at
a distinct location, scaled by a per-group contrast and buried in per-group
Gaussian noise. The default two-group configuration is calibrated so that a
plainly trained small convnet shows a double-digit accuracy gap between the
majority and minority groups, and group-aware batching or loss weighting
can shrink it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, PlanError
from .search_space import BgmSpec, validate_ratio_ordering


@dataclass(frozen=True)
class GroupedDataset:
    features: np.ndarray  # (n, C, S, S) float32
    labels: np.ndarray  # (n,) int
    groups: np.ndarray  # (n,) int
    num_groups: int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        n = len(self.features)
        if len(self.labels) != n or len(self.groups) != n:
            raise ConfigError("features/labels/groups length mismatch")
        if n and (self.groups.min() < 0 or self.groups.max() >= self.num_groups):
            raise ConfigError("group index out of range")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("label out of range")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)
        self.groups.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.sum(self.groups == g)) for g in range(self.num_groups))

    def group_indices(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.groups == g)


@dataclass(frozen=True)
class SyntheticBiasConfig:
    group_counts: tuple[int, ...] = (900, 100)
    shifts: tuple[float, ...] = (1.6, 1.1)  # per-group class-mean separation
    noise_scales: tuple[float, ...] = (0.55, 0.65)
    num_classes: int = 2
    spatial_size: int = 8
    channels: int = 1
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        k = len(self.group_counts)
        if not (len(self.shifts) == len(self.noise_scales) == k):
            raise ConfigError("shifts/noise_scales must have one entry per group")
        if any(c <= 0 for c in self.group_counts):
            raise ConfigError("group counts must be positive")
        if any(s <= 0 for s in self.noise_scales):
            raise ConfigError("noise scales must be positive")
        if any(c < self.num_classes for c in self.group_counts):
            raise ConfigError("each group needs at least one sample per class")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")

    @property
    def num_groups(self) -> int:
        return len(self.group_counts)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticBiasConfig":
        kwargs = dict(d)
        for key in ("group_counts", "shifts", "noise_scales"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic-data keys: {sorted(unknown)}")
        return cls(**kwargs)


def generate_synthetic(cfg: SyntheticBiasConfig) -> tuple[GroupedDataset, GroupedDataset]:
    """Deterministic (train, validation) pair of biased grouped datasets."""
    rng = np.random.default_rng(cfg.seed)
    dim = (cfg.channels, cfg.spatial_size, cfg.spatial_size)
    # One smooth spatial bump per (group, class), each at its own location:
    # a small convnet can learn them as local filters, but the minority
    # group's bumps only get gradient from that group's samples, so
    # underrepresentation translates into a per-group accuracy gap.
    s = cfg.spatial_size
    yy, xx = np.mgrid[0:s, 0:s]
    sigma = s / 5.0

    def bump_at(angle: float, radius: float) -> np.ndarray:
        cy = (s - 1) / 2 + radius * np.sin(angle)
        cx = (s - 1) / 2 + radius * np.cos(angle)
        b = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        return b / np.sqrt((b**2).sum())

    # The class mean mixes a group-SHARED component (quick to learn, so
    # plain training escapes its initial plateau reliably) with a
    # group-SPECIFIC bump that only that group's samples supervise; the
    # minority bumps stay underfit unless batching/weighting favors them.
    n_templates = cfg.num_groups * cfg.num_classes
    dirs = np.empty((cfg.num_groups, cfg.num_classes) + dim)
    for g in range(cfg.num_groups):
        for c in range(cfg.num_classes):
            shared = bump_at(2 * np.pi * c / cfg.num_classes, s / 6.0)
            own = bump_at(2 * np.pi * (g * cfg.num_classes + c) / n_templates, s / 3.0)
            mix = 0.6 * shared + 0.8 * own
            mix /= np.sqrt((mix**2).sum() * cfg.channels)
            dirs[g, c] = mix

    feats, labels, groups = [], [], []
    for g, count in enumerate(cfg.group_counts):
        labs = np.arange(count) % cfg.num_classes  # balanced classes per group
        means = dirs[g, labs] * cfg.shifts[g]
        noise = rng.normal(size=(count,) + dim) * cfg.noise_scales[g]
        feats.append((means + noise).astype(np.float32))
        labels.append(labs)
        groups.append(np.full(count, g))
    features = np.concatenate(feats)
    labels = np.concatenate(labels)
    groups = np.concatenate(groups)

    # Stratified split: the last val_fraction of each (group, class) cell.
    is_val = np.zeros(len(features), dtype=bool)
    for g in range(cfg.num_groups):
        for c in range(cfg.num_classes):
            cell = np.flatnonzero((groups == g) & (labels == c))
            n_val = max(1, int(round(len(cell) * cfg.val_fraction)))
            is_val[cell[-n_val:]] = True

    def subset(mask, split):
        return GroupedDataset(
            features[mask].copy(), labels[mask].copy(), groups[mask].copy(),
            cfg.num_groups, cfg.num_classes, split,
        )

    return subset(~is_val, "train"), subset(is_val, "validation")


@dataclass(frozen=True)
class BatchPlan:
    """Resolved per-batch group counts for a (BgmSpec, batch size) pair."""

    batch_size: int
    group_counts: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if sum(self.group_counts) != self.batch_size:
            raise PlanError("per-group counts must sum to the batch size")


def largest_remainder_counts(ratios: Sequence[float], bs: int) -> tuple[int, ...]:
    """Round o_i * BS to integers that sum to BS (largest-remainder method);
    every positive-ratio group keeps at least one slot when BS allows."""
    exact = [r * bs for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainder = bs - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    if bs >= len(ratios):
        for i, r in enumerate(ratios):
            if r > 0 and counts[i] == 0:
                donor = max(range(len(counts)), key=lambda j: counts[j])
                counts[donor] -= 1
                counts[i] = 1
    return tuple(counts)


def make_batches(
    ds: GroupedDataset, bgm: BgmSpec, bs: int, seed: int
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (features, labels, groups) batches with the BGM composition.

    One epoch covers the largest group at least once; groups that run out
    earlier are resampled with replacement.
    """
    if len(bgm.ratios) != ds.num_groups:
        raise PlanError(f"{len(bgm.ratios)} ratios for {ds.num_groups} groups")
    active = sum(1 for r in bgm.ratios if r > 0)
    if bs < active:
        raise PlanError(f"batch size {bs} below the {active} active groups")
    validate_ratio_ordering(bgm.ratios, ds.group_sizes)
    counts = largest_remainder_counts(bgm.ratios, bs)

    rng = np.random.default_rng(seed)
    pools = [rng.permutation(ds.group_indices(g)) for g in range(ds.num_groups)]
    cursors = [0] * ds.num_groups
    majority = int(np.argmax(ds.group_sizes))
    if counts[majority] == 0:
        raise PlanError("majority group has a zero batch share")
    n_batches = int(np.ceil(ds.group_sizes[majority] / counts[majority]))

    for _ in range(n_batches):
        idx_parts = []
        for g in range(ds.num_groups):
            need = counts[g]
            take = pools[g][cursors[g] : cursors[g] + need]
            cursors[g] += len(take)
            if len(take) < need:  # exhausted: resample with replacement
                extra = rng.choice(ds.group_indices(g), size=need - len(take), replace=True)
                take = np.concatenate([take, extra])
            idx_parts.append(take)
        idx = np.concatenate(idx_parts)
        yield ds.features[idx], ds.labels[idx], ds.groups[idx]


# --- manifest ingestion -----------------------------------------------------
#
# Manifest CSV: a header line "#shape=C,S,S", then rows
#   id,group,label,split,tensor_path
# Tensor files hold raw little-endian float32, C*S*S values each.


def save_dataset(datasets: Sequence[GroupedDataset], out_dir, manifest_name="manifest.csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = datasets[0].features.shape[1:]
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="") as fh:
        fh.write("#shape=" + ",".join(str(s) for s in shape) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "group", "label", "split", "tensor_path"])
        uid = 0
        for ds in datasets:
            for i in range(len(ds)):
                rel = f"tensors/{uid:06d}.f32"
                path = out_dir / rel
                path.parent.mkdir(exist_ok=True)
                ds.features[i].astype("<f4").tofile(path)
                writer.writerow([uid, int(ds.groups[i]), int(ds.labels[i]), ds.split, rel])
                uid += 1
    return manifest


def load_dataset(root, manifest, split: str | None = None) -> GroupedDataset:
    """Load a GroupedDataset from a manifest; `split` filters rows by tag."""
    root = Path(root)
    manifest = Path(manifest)
    try:
        lines = manifest.read_text().splitlines()
    except OSError as e:
        raise IngestionError(f"cannot read manifest: {e}") from e
    if not lines or not lines[0].startswith("#shape="):
        raise IngestionError("manifest missing '#shape=C,S,S' header line")
    try:
        shape = tuple(int(v) for v in lines[0][len("#shape="):].split(","))
    except ValueError as e:
        raise IngestionError(f"bad shape header: {lines[0]!r}") from e
    if len(shape) != 3:
        raise IngestionError(f"shape header must have 3 dims, got {shape}")
    expected = int(np.prod(shape))

    reader = csv.DictReader(lines[1:])
    feats, labels, groups = [], [], []
    for rownum, row in enumerate(reader, start=3):  # header lines are 1-2
        try:
            group = int(row["group"])
            label = int(row["label"])
            tag = row["split"]
            rel = row["tensor_path"]
        except (KeyError, TypeError, ValueError) as e:
            raise IngestionError(f"malformed row {row!r}", row=rownum) from e
        if group < 0:
            raise IngestionError(f"unknown group index {group}", row=rownum)
        if label < 0:
            raise IngestionError(f"unknown label index {label}", row=rownum)
        if split is not None and tag != split:
            continue
        path = root / rel
        if not path.is_file():
            raise IngestionError(f"missing tensor file {path}", row=rownum)
        data = np.fromfile(path, dtype="<f4")
        if data.size != expected:
            raise IngestionError(
                f"tensor {path} has {data.size} values, expected {expected}", row=rownum
            )
        feats.append(data.reshape(shape))
        labels.append(label)
        groups.append(group)
    if not feats:
        raise IngestionError("no samples" + (f" for split {split!r}" if split else ""))
    features = np.stack(feats).astype(np.float32)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    return GroupedDataset(
        features, labels, groups,
        num_groups=int(groups.max()) + 1,
        num_classes=int(labels.max()) + 1,
        split=split or "all",
    )
