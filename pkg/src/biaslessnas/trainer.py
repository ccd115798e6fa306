"""Fairness-aware training loop.

Each sample's cross-entropy term is scaled by max_j(o_j) / o_group(sample),
so per-batch group contributions are balanced regardless of how many slots
the BGM assigns to each group. With equal ratios the weights are all exactly
1.0 and the loss is bitwise identical to plain summed cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import GroupedDataset, make_batches
from .errors import ConfigError, NumericError, PlanError, WeightingError
from .nn_engine import ChildNetwork, compile_network, sgd_step
from .search_space import ArchitectureEncoding, BgmSpec

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    lr_decay: float = 0.9
    decay_interval: int = 20
    seed: int = 0
    plain_loss: bool = False  # drop the group weights (vanilla cross-entropy)
    mean_normalize: bool = False  # divide the summed loss by the batch size

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.decay_interval < 1:
            raise ConfigError("decay_interval must be >= 1")

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.decay_interval)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FairLossReport:
    loss: float
    group_loss: tuple[float, ...]
    weights: np.ndarray


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fair_loss(
    logits: np.ndarray,
    labels: Sequence[int],
    groups: Sequence[int],
    bgm: BgmSpec,
    plain: bool = False,
    mean_normalize: bool = False,
) -> tuple[FairLossReport, np.ndarray]:
    """Group-weighted summed cross-entropy and its gradient w.r.t. logits."""
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    n = logits.shape[0]
    if len(labels) != n or len(groups) != n:
        raise ConfigError("logits/labels/groups row mismatch")

    ratios = np.asarray(bgm.ratios, dtype=np.float64)
    if plain:
        weights = np.ones(n)
    else:
        present = np.unique(groups)
        dead = [int(g) for g in present if ratios[g] == 0]
        if dead:
            raise WeightingError(f"group(s) {dead} present in batch but have o_i = 0")
        weights = ratios.max() / ratios[groups]

    probs = _softmax(logits.astype(np.float64))
    p_true = np.clip(probs[np.arange(n), labels], PROB_CLAMP, None)
    per_sample = -weights * np.log(p_true)

    scale = 1.0 / n if mean_normalize else 1.0
    num_groups = len(bgm.ratios)
    group_loss = tuple(
        float(per_sample[groups == g].sum() * scale) for g in range(num_groups)
    )
    loss = float(per_sample.sum() * scale)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad *= (weights * scale)[:, None]
    return FairLossReport(loss, group_loss, weights), grad.astype(logits.dtype)


def train_child(
    enc: ArchitectureEncoding,
    bgm: BgmSpec,
    ds_train: GroupedDataset,
    cfg: TrainConfig,
) -> tuple[ChildNetwork, list[dict]]:
    """Train a freshly initialized child network; returns it and a per-step
    loss trace (epoch, step, loss, lr)."""
    if len(ds_train) < cfg.batch_size:
        raise PlanError(
            f"dataset of {len(ds_train)} samples smaller than one batch ({cfg.batch_size})"
        )
    shape = ds_train.features.shape[1:]
    net = compile_network(enc, shape, seed=cfg.seed)
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        batches = make_batches(ds_train, bgm, cfg.batch_size, seed=cfg.seed * 100003 + epoch)
        for feats, labels, groups in batches:
            lr = cfg.lr_at(step)
            try:
                logits = net.forward(feats)
                report, dlogits = fair_loss(
                    logits, labels, groups, bgm,
                    plain=cfg.plain_loss, mean_normalize=cfg.mean_normalize,
                )
                grads = net.backward(dlogits)
            except NumericError as e:
                raise NumericError(f"diverged at epoch {epoch}, step {step}: {e}") from e
            sgd_step(net, grads, lr)
            trace.append({"epoch": epoch, "step": step, "loss": report.loss, "lr": lr})
            step += 1
    return net, trace
