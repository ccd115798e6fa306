"""Shared fixtures. The expensive training-based runs are session-scoped so
the calibration checks and the end-to-end acceptance tests share them."""

import json
from pathlib import Path

import pytest

from biaslessnas.cli import ExperimentConfig, run_ablation, run_search
from biaslessnas.controller import ReinforceConfig, RewardConfig
from biaslessnas.data import SyntheticBiasConfig, generate_synthetic
from biaslessnas.evaluator import evaluate
from biaslessnas.search_space import BgmSpec, SearchSpaceConfig, fixed_point
from biaslessnas.trainer import TrainConfig, train_child

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def default_splits():
    return generate_synthetic(SyntheticBiasConfig())


@pytest.fixture(scope="session")
def fat_baseline_runs(default_splits):
    """Per seed: (plain proportional baseline report, FAT report) for the
    same fixed architecture on the default synthetic dataset."""
    train, val = default_splits
    space = SearchSpaceConfig(depth=4, channel_choices=(8,), kernel_choices=(3,))
    enc = fixed_point("all-CB", space)
    sizes = train.group_sizes
    total = sum(sizes)
    proportional = BgmSpec(tuple(s / total for s in sizes))
    fat = BgmSpec((0.5, 0.5))
    runs = []
    for seed in SEEDS:
        base_cfg = TrainConfig(epochs=30, batch_size=32, seed=seed, plain_loss=True)
        fat_cfg = TrainConfig(epochs=30, batch_size=32, seed=seed, plain_loss=False)
        net_base, _ = train_child(enc, proportional, train, base_cfg)
        net_fat, _ = train_child(enc, fat, train, fat_cfg)
        runs.append((evaluate(net_base, val), evaluate(net_fat, val)))
    return runs


def desk_search_config(out_dir: Path, **over) -> ExperimentConfig:
    """The acceptance-scale search setup: depth 4, two channel choices,
    two kernels, 30-epoch children, 3 controller updates of 4 episodes."""
    base = dict(
        mode="search",
        search_space=SearchSpaceConfig(
            depth=4, channel_choices=(8, 16), kernel_choices=(1, 3)
        ),
        trainer=TrainConfig(epochs=30, batch_size=32),
        reinforce=ReinforceConfig(episode_batch=4),
        iterations=3,
        seeds=SEEDS,
        out_dir=str(out_dir),
        fixed_arch="alt-RB-CB",
    )
    base.update(over)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def ablation_results(tmp_path_factory):
    """Full five-arm ablation at desk scale, five seeds per arm. Returns the
    ranking rows and the output directory (per-seed best records of the
    search arms live under it)."""
    out = tmp_path_factory.mktemp("ablation")
    cfg = desk_search_config(out, mode="ablation")
    rows = run_ablation(cfg)
    return rows, out


@pytest.fixture(scope="session")
def preset_search_bests(tmp_path_factory, ablation_results):
    """Per-seed best records for the two reward presets.

    The fairness-weighted preset (alpha=0.2, beta=0.8) is exactly the
    configuration of the ablation's full arm, so its best records are read
    back from that run instead of searching twice."""
    _, abl_out = ablation_results
    fair = []
    for seed in SEEDS:
        payload = json.loads(
            (abl_out / "ablation_full" / f"best_seed{seed}.json").read_text()
        )
        fair.append(payload)
    acc_out = tmp_path_factory.mktemp("acc_preset")
    acc_cfg = desk_search_config(
        acc_out, reward=RewardConfig(alpha=0.8, beta=0.2)
    )
    acc = []
    for seed in SEEDS:
        best = run_search(acc_cfg, seed)
        acc.append(json.loads(best.to_json()))
    return {"fair": fair, "acc": acc}
