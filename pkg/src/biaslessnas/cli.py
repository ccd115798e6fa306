"""Experiment orchestration: search, training, evaluation, ablations.

Commands: search, surrogate-search, train-one, evaluate, ablation,
emit-plots. Everything is driven by an ExperimentConfig (JSON file plus flag
overrides) and is reproducible per master seed: the controller seed, the
per-episode sampling seeds, and the per-child init/data seeds are all derived
hierarchically from it, so traces are byte-identical across runs.

Wall-clock timings go to a sidecar meta JSON, never into the trace CSV,
which keeps the trace deterministic.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as data_mod
from .controller import (
    ControllerPolicy,
    Episode,
    ReinforceConfig,
    RewardConfig,
    compute_reward,
    reinforce_update,
)
from .errors import (
    BiaslessNasError,
    ConfigError,
    ConstraintError,
    IngestionError,
    NumericError,
    PresetNotFoundError,
)
from .evaluator import EvalReport, evaluate
from .search_space import (
    ArchitectureEncoding,
    BgmSpec,
    SearchSpaceConfig,
    TokenSchema,
    canonical_text,
    decode_tokens,
    default_ratio_candidates,
    encoding_text,
    fixed_point,
)
from .surrogate import build_table, surrogate_evaluate
from .trainer import TrainConfig, train_child

TRACE_FIELDS = [
    "iteration", "update", "episode", "tokens", "encoding", "ratios",
    "overall_acc", "group_accs", "unfairness", "di", "spd",
    "reward", "baseline", "grad_norm",
]

REWARD_PRESETS = {
    "biaslessnas-fair": RewardConfig(alpha=0.2, beta=0.8),
    "biaslessnas-acc": RewardConfig(alpha=0.8, beta=0.2),
}

ABLATION_ARMS = ("vanilla", "fprime", "d_fprime", "n_only", "full")


def seed_for(master: int, *path: int) -> int:
    return int(np.random.SeedSequence((master,) + path).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    mode: str = "search"
    search_space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    reinforce: ReinforceConfig = field(default_factory=ReinforceConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    synthetic: data_mod.SyntheticBiasConfig = field(default_factory=data_mod.SyntheticBiasConfig)
    dataset_root: str | None = None
    dataset_manifest: str | None = None
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    iterations: int = 200  # controller updates
    hidden: int = 32
    fixed_arch: str = "all-CB"
    ratio_preset: str = "searched"  # searched | proportional | fat
    ratio_grid_auto: bool = True
    surrogate_seed: int = 1234
    surrogate_cap: int = 10_000
    train_on_validation: bool = False
    fixed_depth: int | None = None  # depth override for fixed-point baselines
    fixed_epochs: int | None = None  # epoch override for fixed-point baselines

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.ratio_preset not in ("searched", "proportional", "fat"):
            raise ConfigError(f"unknown ratio preset {self.ratio_preset!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kwargs: dict = {}
        space = d.pop("search_space", {})
        kwargs["ratio_grid_auto"] = "ratio_candidates" not in space
        kwargs["search_space"] = SearchSpaceConfig.from_dict(space)
        kwargs["reward"] = RewardConfig.from_dict(d.pop("reward", {}))
        kwargs["reinforce"] = ReinforceConfig.from_dict(d.pop("reinforce", {}))
        kwargs["trainer"] = TrainConfig.from_dict(d.pop("trainer", {}))
        kwargs["synthetic"] = data_mod.SyntheticBiasConfig.from_dict(d.pop("synthetic", {}))
        if "seeds" in d:
            kwargs["seeds"] = tuple(d.pop("seeds"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)


def load_splits(cfg: ExperimentConfig) -> tuple[data_mod.GroupedDataset, data_mod.GroupedDataset]:
    if cfg.dataset_manifest is not None:
        root = cfg.dataset_root or os.path.dirname(cfg.dataset_manifest)
        train = data_mod.load_dataset(root, cfg.dataset_manifest, split="train")
        val = data_mod.load_dataset(root, cfg.dataset_manifest, split="validation")
        return train, val
    return data_mod.generate_synthetic(cfg.synthetic)


def _ratio_tuple(preset: str, group_sizes: Sequence[int]) -> tuple[float, ...]:
    total = sum(group_sizes)
    if preset == "proportional":
        return tuple(s / total for s in group_sizes)
    if preset == "fat":
        return tuple(1.0 / len(group_sizes) for _ in group_sizes)
    raise ConfigError(f"unknown ratio preset {preset!r}")


def bind_space(cfg: ExperimentConfig, group_sizes: Sequence[int]) -> SearchSpaceConfig:
    """Resolve the search space against the dataset's group sizes: fill in
    the default ratio grid, or pin the ratio slot to a preset."""
    space = cfg.search_space
    if cfg.ratio_preset != "searched":
        return dataclasses.replace(
            space, ratio_candidates=(_ratio_tuple(cfg.ratio_preset, group_sizes),)
        )
    if cfg.ratio_grid_auto and len(group_sizes) == 2:
        return dataclasses.replace(
            space, ratio_candidates=default_ratio_candidates(group_sizes)
        )
    return space


@dataclass
class BestRecord:
    seed: int
    update: int
    episode: int
    reward: float
    tokens: tuple[int, ...]
    encoding: str
    ratios: tuple[float, ...]
    report: EvalReport

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "update": self.update,
                "episode": self.episode,
                "reward": self.reward,
                "tokens": list(self.tokens),
                "encoding": self.encoding,
                "ratios": list(self.ratios),
                "report": json.loads(self.report.to_json()),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "BestRecord":
        payload = json.loads(text)
        return cls(
            seed=payload["seed"],
            update=payload["update"],
            episode=payload["episode"],
            reward=payload["reward"],
            tokens=tuple(payload["tokens"]),
            encoding=payload["encoding"],
            ratios=tuple(payload["ratios"]),
            report=EvalReport.from_json(json.dumps(payload["report"])),
        )


def _fmt(v: float) -> str:
    return repr(float(v))


class TraceWriter:
    """Incremental, append-only CSV trace with deterministic formatting."""

    def __init__(self, path: Path, resume: bool):
        self.path = path
        exists = path.exists()
        if not resume or not exists:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(TRACE_FIELDS)

    def last_update(self) -> int:
        """Index of the last fully persisted controller update, or -1."""
        last = -1
        with open(self.path, newline="") as fh:
            for row in csv.DictReader(fh):
                last = max(last, int(row["update"]))
        return last

    def append(self, rows: list[dict]) -> None:
        with open(self.path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            for row in rows:
                writer.writerow(row)


def run_search(cfg: ExperimentConfig, master_seed: int, resume: bool = False) -> BestRecord:
    """One seeded search: the sample -> train/evaluate -> reward -> update
    loop, with the trace persisted incrementally under cfg.out_dir."""
    t0 = time.monotonic()
    surrogate_mode = cfg.mode == "surrogate-search"
    ds_train, ds_val = load_splits(cfg)
    group_sizes = ds_train.group_sizes
    space = bind_space(cfg, group_sizes)
    schema = TokenSchema.build(space, group_sizes)

    rc = cfg.reinforce
    if rc.steps_per_episode is not None and rc.steps_per_episode != len(schema):
        raise ConfigError(
            f"steps_per_episode={rc.steps_per_episode} but the token schema has "
            f"{len(schema)} slots"
        )

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = TraceWriter(out / f"trace_seed{master_seed}.csv", resume)
    ckpt_path = out / f"policy_seed{master_seed}.npz"

    policy = ControllerPolicy(schema.slot_sizes, hidden=cfg.hidden, seed=seed_for(master_seed, 0))
    start_update = 0
    if resume and ckpt_path.exists():
        policy.load(ckpt_path)
        start_update = trace.last_update() + 1

    table = None
    if surrogate_mode:
        table = build_table(
            space, group_sizes, cfg.surrogate_seed, cap=cfg.surrogate_cap, reward_cfg=cfg.reward
        )

    fit_split = ds_val if cfg.train_on_validation else ds_train
    best: BestRecord | None = None
    best_path = out / f"best_seed{master_seed}.json"
    if resume and start_update > 0 and best_path.exists():
        # carry the incumbent across the restart so a finished run stays stable
        best = BestRecord.from_json(best_path.read_text())
    m = rc.episode_batch
    for update in range(start_update, cfg.iterations):
        episodes, rows = [], []
        for e in range(m):
            tokens, log_probs = policy.sample(seed_for(master_seed, 1, update, e))
            report = None
            enc_text, ratio_text = "INVALID", ""
            ratios: tuple[float, ...] = ()
            try:
                bgm, enc = decode_tokens(tokens, space, group_sizes, schema)
                enc_text = encoding_text(enc)
                ratios = bgm.ratios
                ratio_text = " ".join(_fmt(r) for r in ratios)
                if surrogate_mode:
                    report = surrogate_evaluate(table, enc, bgm)
                else:
                    tcfg = dataclasses.replace(
                        cfg.trainer, seed=seed_for(master_seed, 2, update, e)
                    )
                    net, _ = train_child(enc, bgm, fit_split, tcfg)
                    report = evaluate(net, ds_val)
                reward = compute_reward(report, cfg.reward)
            except (ConstraintError, NumericError):
                # invalid or diverged children score like below-threshold ones
                reward = -1.0
            episodes.append(Episode(tokens, log_probs, reward))
            rows.append(
                {
                    "iteration": update * m + e,
                    "update": update,
                    "episode": e,
                    "tokens": " ".join(str(t) for t in tokens),
                    "encoding": enc_text,
                    "ratios": ratio_text,
                    "overall_acc": _fmt(report.overall_acc) if report else "nan",
                    "group_accs": " ".join(_fmt(a) for a in report.group_acc) if report else "",
                    "unfairness": _fmt(report.unfairness) if report else "nan",
                    "di": _fmt(report.di) if report else "nan",
                    "spd": _fmt(report.spd) if report else "nan",
                    "reward": _fmt(reward),
                }
            )
            if report is not None and (best is None or reward > best.reward):
                best = BestRecord(
                    master_seed, update, e, reward, tokens, enc_text, ratios, report
                )
        grad_norm = reinforce_update(policy, episodes, rc)
        for row in rows:
            row["baseline"] = _fmt(policy.baseline)
            row["grad_norm"] = _fmt(grad_norm)
        trace.append(rows)
        policy.save(ckpt_path)
        if best is not None:
            # persisted per update so a restart keeps the incumbent
            best_path.write_text(best.to_json() + "\n")

    if best is None:
        raise NumericError("search produced no evaluable candidate")
    meta = {
        "seed": master_seed,
        "mode": cfg.mode,
        "updates": cfg.iterations,
        "episodes_per_update": m,
        "wall_time_s": time.monotonic() - t0,
    }
    (out / f"meta_seed{master_seed}.json").write_text(json.dumps(meta, indent=2) + "\n")
    return best


def train_fixed(
    cfg: ExperimentConfig,
    arch_name: str,
    ratio_preset: str,
    master_seed: int,
    plain_loss: bool | None = None,
):
    """Train a named fixed-point architecture with a ratio preset."""
    ds_train, ds_val = load_splits(cfg)
    group_sizes = ds_train.group_sizes
    space = cfg.search_space
    if cfg.fixed_depth is not None:
        space = dataclasses.replace(space, depth=cfg.fixed_depth)
    enc = fixed_point(arch_name, space)
    bgm = BgmSpec(_ratio_tuple(ratio_preset, group_sizes))
    tcfg = dataclasses.replace(
        cfg.trainer,
        seed=seed_for(master_seed, 3),
        plain_loss=cfg.trainer.plain_loss if plain_loss is None else plain_loss,
        epochs=cfg.trainer.epochs if cfg.fixed_epochs is None else cfg.fixed_epochs,
    )
    fit_split = ds_val if cfg.train_on_validation else ds_train
    net, loss_trace = train_child(enc, bgm, fit_split, tcfg)
    report = evaluate(net, ds_val)
    return net, bgm, report, loss_trace


def run_ablation(cfg: ExperimentConfig, arms: Sequence[str] = ABLATION_ARMS) -> list[dict]:
    """Run the optimization-combination arms and rank them.

    Arms: vanilla (fixed arch, plain loss, proportional batches), fprime
    (fair loss), d_fprime (fair loss + equal batch shares), n_only
    (architecture search with the plain trainer, selecting by accuracy),
    full (search with fair loss and searched batch shares). Per-arm metrics
    are medians over the configured seeds; the ranking orders acceptable
    arms by median unfairness ascending, breaking ties by higher median
    accuracy. Arms whose median accuracy falls below the reward's
    acceptance threshold rank behind every acceptable arm: an undertrained
    model with near-uniform predictions scores a deceptively low
    unfairness, and the floor keeps that artifact from dominating the
    table, mirroring how the reward itself rejects below-threshold
    candidates outright.
    """
    unknown = set(arms) - set(ABLATION_ARMS)
    if unknown:
        raise ConfigError(f"unknown ablation arms: {sorted(unknown)}")
    results: dict[str, list[EvalReport]] = {a: [] for a in arms}
    out = Path(cfg.out_dir)
    for arm in arms:
        for seed in cfg.seeds:
            if arm in ("vanilla", "fprime", "d_fprime"):
                preset = "fat" if arm == "d_fprime" else "proportional"
                _, _, report, _ = train_fixed(
                    cfg, cfg.fixed_arch, preset, seed, plain_loss=(arm == "vanilla")
                )
            else:
                arm_cfg = dataclasses.replace(
                    cfg,
                    mode="search",
                    out_dir=str(out / f"ablation_{arm}"),
                    ratio_preset="proportional" if arm == "n_only" else "searched",
                    trainer=dataclasses.replace(cfg.trainer, plain_loss=(arm == "n_only")),
                    # a pure architecture search selects by accuracy alone;
                    # only the full arm keeps the fairness-weighted reward
                    reward=dataclasses.replace(cfg.reward, alpha=1.0, beta=0.0)
                    if arm == "n_only"
                    else cfg.reward,
                )
                report = run_search(arm_cfg, seed).report
            results[arm].append(report)

    rows = []
    for arm in arms:
        reps = results[arm]
        rows.append(
            {
                "arm": arm,
                "acc_median": float(np.median([r.overall_acc for r in reps])),
                "unfairness_median": float(np.median([r.unfairness for r in reps])),
                "di_median": float(np.median([r.di for r in reps])),
            }
        )
    floor = cfg.reward.ac_threshold
    rows.sort(
        key=lambda r: (
            r["acc_median"] < floor,
            r["unfairness_median"],
            -r["acc_median"],
        )
    )
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_ranking.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["rank", "arm", "acc_median", "unfairness_median", "di_median"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in writer.fieldnames})
    return rows


def emit_plot_data(trace_path, out_dir) -> tuple[Path, Path]:
    """Write accuracy-vs-unfairness scatter and reward-curve CSVs."""
    trace_path = Path(trace_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(trace_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"trace {trace_path} has no rows")
    scatter = out_dir / "scatter_acc_vs_unfairness.csv"
    with open(scatter, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "overall_acc", "unfairness", "reward"])
        for row in rows:
            writer.writerow([row["iteration"], row["overall_acc"], row["unfairness"], row["reward"]])
    curve = out_dir / "reward_curve.csv"
    with open(curve, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "reward", "baseline"])
        for row in rows:
            writer.writerow([row["iteration"], row["reward"], row["baseline"]])
    return scatter, curve


# --- command line ------------------------------------------------------------


def _build_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    over: dict = {}
    if getattr(args, "seeds", None):
        over["seeds"] = tuple(args.seeds)
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    elif os.environ.get("BIASLESSNAS_OUT"):
        over["out_dir"] = str(Path(os.environ["BIASLESSNAS_OUT"]) / cfg.out_dir)
    if getattr(args, "iterations", None):
        over["iterations"] = args.iterations
    if getattr(args, "preset", None):
        over["reward"] = REWARD_PRESETS[args.preset]
    if getattr(args, "episodes", None):
        over["reinforce"] = dataclasses.replace(cfg.reinforce, episode_batch=args.episodes)
    if getattr(args, "epochs", None):
        over["trainer"] = dataclasses.replace(cfg.trainer, epochs=args.epochs)
    if over:
        cfg = dataclasses.replace(cfg, **over)
    return cfg


def _add_common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seeds", type=int, nargs="+", help="master seeds")
    p.add_argument("--out", help="output directory")


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="biaslessnas")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("search", "surrogate-search"):
        p = sub.add_parser(name, help=f"run a {name.replace('-', ' ')}")
        _add_common(p)
        p.add_argument("--iterations", type=int, help="controller updates")
        p.add_argument("--episodes", type=int, help="episodes per update (m)")
        p.add_argument("--epochs", type=int, help="child training epochs")
        p.add_argument("--preset", choices=sorted(REWARD_PRESETS), help="reward preset")
        p.add_argument("--resume", action="store_true", help="continue from the saved trace")

    p = sub.add_parser("train-one", help="train a fixed-point architecture")
    _add_common(p)
    p.add_argument("--arch", default="all-CB", help="fixed-point name")
    p.add_argument("--ratios", default="proportional", choices=["proportional", "fat"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--plain-loss", action="store_true")

    p = sub.add_parser("evaluate", help="evaluate a trained snapshot")
    _add_common(p)
    p.add_argument("--arch", default="all-CB")
    p.add_argument("--snapshot", required=True)

    p = sub.add_parser("ablation", help="run the optimization-combination arms")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--arms", nargs="+", choices=ABLATION_ARMS, default=list(ABLATION_ARMS))

    p = sub.add_parser("emit-plots", help="emit plot-ready CSVs from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, PresetNotFoundError, BiaslessNasError) as e:
        if isinstance(e, NumericError):
            print(f"numeric failure: {e}", file=sys.stderr)
            return 3
        if isinstance(e, IngestionError):
            print(f"io failure: {e}", file=sys.stderr)
            return 4
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io failure: {e}", file=sys.stderr)
        return 4


def _dispatch(args) -> int:
    if args.command == "emit-plots":
        scatter, curve = emit_plot_data(args.trace, args.out)
        print(scatter)
        print(curve)
        return 0

    cfg = _build_config(args)
    if args.command in ("search", "surrogate-search"):
        cfg = dataclasses.replace(cfg, mode=args.command)
        for seed in cfg.seeds:
            best = run_search(cfg, seed, resume=args.resume)
            print(f"seed {seed}: best reward {best.reward:.5f} {best.encoding}")
        return 0
    if args.command == "train-one":
        from .nn_engine import save_snapshot

        seed = cfg.seeds[0]
        if args.plain_loss:
            cfg = dataclasses.replace(
                cfg, trainer=dataclasses.replace(cfg.trainer, plain_loss=True)
            )
        net, bgm, report, _ = train_fixed(cfg, args.arch, args.ratios, seed)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        snap = out / f"{args.arch}_seed{seed}.npz"
        save_snapshot(net, snap)
        (out / f"{args.arch}_seed{seed}_report.json").write_text(report.to_json() + "\n")
        print(report.to_json())
        print(f"snapshot: {snap}")
        return 0
    if args.command == "evaluate":
        from .nn_engine import compile_network, load_snapshot

        _, ds_val = load_splits(cfg)
        enc = fixed_point(args.arch, cfg.search_space)
        net = compile_network(enc, ds_val.features.shape[1:], seed=0)
        load_snapshot(net, args.snapshot)
        report = evaluate(net, ds_val)
        print(report.to_json())
        return 0
    if args.command == "ablation":
        rows = run_ablation(cfg, tuple(args.arms))
        for row in rows:
            print(
                f"{row['rank']}. {row['arm']}: acc={row['acc_median']:.4f} "
                f"U={row['unfairness_median']:.4f} DI={row['di_median']:.4f}"
            )
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
