"""Tabular stand-in for the train-then-evaluate loop.

Maps every point of a small search space to fixed per-group accuracies, with
exactly one planted point whose reward under a reference RewardConfig is
strictly maximal. Controller convergence can then be tested against a known
answer without any training noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .controller import RewardConfig, compute_reward
from .errors import MissingEntryError, SizeError
from .evaluator import EvalReport, report_from_accuracies
from .search_space import (
    ArchitectureEncoding,
    BgmSpec,
    SearchSpaceConfig,
    canonical_text,
    enumerate_space,
    iter_space,
)

DEFAULT_CAP = 10_000
PLANTED_ACC = 0.97
BASE_ACC_RANGE = (0.3, 0.75)


@dataclass(frozen=True)
class SurrogateTable:
    entries: dict[str, tuple[float, ...]]
    group_sizes: tuple[int, ...]
    seed: int
    noise_scale: float
    reward_cfg: RewardConfig
    planted_key: str

    def lookup(self, enc: ArchitectureEncoding, bgm: BgmSpec) -> tuple[float, ...]:
        key = canonical_text(bgm, enc)
        if key not in self.entries:
            raise MissingEntryError(f"no surrogate entry for {key}")
        return self.entries[key]


def build_table(
    cfg: SearchSpaceConfig,
    group_sizes: Sequence[int],
    seed: int,
    cap: int = DEFAULT_CAP,
    noise_scale: float = 0.0,
    reward_cfg: RewardConfig | None = None,
) -> SurrogateTable:
    """Seeded table over the whole space with one planted optimum."""
    count = enumerate_space(cfg, group_sizes)
    if count > cap:
        raise SizeError(f"space has {count} points, above the cap {cap}")
    if reward_cfg is None:
        reward_cfg = RewardConfig()
    group_sizes = tuple(int(s) for s in group_sizes)

    rng = np.random.default_rng(seed)
    lo, hi = BASE_ACC_RANGE
    entries: dict[str, tuple[float, ...]] = {}
    for bgm, enc in iter_space(cfg, group_sizes):
        accs = rng.uniform(lo, hi, size=len(group_sizes))
        entries[canonical_text(bgm, enc)] = tuple(float(a) for a in accs)

    keys = sorted(entries)
    planted_key = keys[int(rng.integers(len(keys)))]
    entries[planted_key] = (PLANTED_ACC,) * len(group_sizes)

    table = SurrogateTable(entries, group_sizes, seed, noise_scale, reward_cfg, planted_key)
    best = max(keys, key=lambda k: _entry_reward(table, k))
    assert best == planted_key, "planted optimum is not the reward argmax"
    second = max(
        (_entry_reward(table, k) for k in keys if k != planted_key), default=-1.0
    )
    assert _entry_reward(table, planted_key) > second, "planted optimum not strict"
    return table


def _entry_reward(table: SurrogateTable, key: str) -> float:
    report = report_from_accuracies(table.entries[key], table.group_sizes)
    return compute_reward(report, table.reward_cfg)


def surrogate_evaluate(
    table: SurrogateTable,
    enc: ArchitectureEncoding,
    bgm: BgmSpec,
    rng: np.random.Generator | None = None,
) -> EvalReport:
    """EvalReport for a table entry, derived with the evaluator's formulas.
    In stochastic mode (noise_scale > 0 and an rng given) the stored
    accuracies are perturbed before the report is built."""
    accs = np.asarray(table.lookup(enc, bgm), dtype=np.float64)
    if table.noise_scale > 0 and rng is not None:
        accs = np.clip(accs + rng.normal(scale=table.noise_scale, size=accs.shape), 0.0, 1.0)
    return report_from_accuracies([float(a) for a in accs], table.group_sizes)


def save_table(table: SurrogateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["encoding"] + [f"acc_g{i + 1}" for i in range(len(table.group_sizes))]
        writer.writerow(header)
        for key in sorted(table.entries):
            writer.writerow([key] + [repr(a) for a in table.entries[key]])


def load_table(
    path,
    group_sizes: Sequence[int],
    seed: int = 0,
    noise_scale: float = 0.0,
    reward_cfg: RewardConfig | None = None,
) -> SurrogateTable:
    entries: dict[str, tuple[float, ...]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            entries[row[0]] = tuple(float(v) for v in row[1:])
    if reward_cfg is None:
        reward_cfg = RewardConfig()
    table = SurrogateTable(
        entries, tuple(int(s) for s in group_sizes), seed, noise_scale, reward_cfg, ""
    )
    planted = max(entries, key=lambda k: _entry_reward(table, k))
    return SurrogateTable(
        entries, table.group_sizes, seed, noise_scale, reward_cfg, planted
    )
