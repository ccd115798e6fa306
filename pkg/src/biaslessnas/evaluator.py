"""Accuracy and fairness metrics for trained child networks.

Accuracies are kept as exact rationals (correct counts over totals, or
decimal inputs) until the final float conversion, so metric arithmetic on
published accuracy figures reproduces exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import DegenerateMetricError, EvaluationError

RationalLike = int | float | str | Fraction


def _to_fraction(v: RationalLike) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(str(v))


@dataclass(frozen=True)
class EvalReport:
    overall_acc: float
    group_acc: tuple[float, ...]
    unfairness: float
    di: float
    spd: float
    group_counts: tuple[int, ...]
    group_correct: tuple[int, ...] | None = None

    def recompute_unfairness(self) -> float:
        """Unfairness from the stored (exact) count fields."""
        if self.group_correct is None:
            acc = [Fraction(a) for a in self.group_acc]
            overall = Fraction(self.overall_acc)
        else:
            acc = [Fraction(c, n) for c, n in zip(self.group_correct, self.group_counts)]
            overall = Fraction(sum(self.group_correct), sum(self.group_counts))
        return float(sum(abs(a - overall) for a in acc))

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall_acc": self.overall_acc,
                "group_acc": list(self.group_acc),
                "unfairness": self.unfairness,
                "di": self.di,
                "spd": self.spd,
                "group_counts": list(self.group_counts),
                "group_correct": None if self.group_correct is None else list(self.group_correct),
            }
        )

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        d = json.loads(s)
        return cls(
            d["overall_acc"],
            tuple(d["group_acc"]),
            d["unfairness"],
            d["di"],
            d["spd"],
            tuple(d["group_counts"]),
            None if d["group_correct"] is None else tuple(d["group_correct"]),
        )


def unfairness_score(group_acc: Sequence[RationalLike], overall_acc: RationalLike) -> float:
    """Sum over groups of |group accuracy - overall accuracy|."""
    overall = _to_fraction(overall_acc)
    return float(sum(abs(_to_fraction(a) - overall) for a in group_acc))


def _rates(
    group_acc: Sequence[Fraction],
    group_counts: Sequence[int],
    privileged: int | None,
    unprivileged: int | None,
) -> tuple[Fraction, Fraction]:
    if privileged is None:
        privileged = max(range(len(group_counts)), key=lambda g: (group_counts[g], -g))
    if unprivileged is None:
        unprivileged = min(range(len(group_counts)), key=lambda g: (group_counts[g], g))
    return group_acc[unprivileged], group_acc[privileged]


def disparate_impact(
    group_acc: Sequence[RationalLike],
    group_counts: Sequence[int],
    privileged: int | None = None,
    unprivileged: int | None = None,
) -> float:
    """Favorable-rate ratio, unprivileged over privileged. The favorable
    outcome is a correct prediction; the privileged group defaults to the
    largest one. Both choices are overridable."""
    acc = [_to_fraction(a) for a in group_acc]
    unpriv, priv = _rates(acc, group_counts, privileged, unprivileged)
    if priv == 0:
        raise DegenerateMetricError("privileged favorable rate is zero; DI undefined")
    return float(unpriv / priv)


def statistical_parity_difference(
    group_acc: Sequence[RationalLike],
    group_counts: Sequence[int],
    privileged: int | None = None,
    unprivileged: int | None = None,
) -> float:
    """Favorable-rate difference, unprivileged minus privileged."""
    acc = [_to_fraction(a) for a in group_acc]
    unpriv, priv = _rates(acc, group_counts, privileged, unprivileged)
    return float(unpriv - priv)


def report_from_group_stats(
    group_correct: Sequence[int], group_counts: Sequence[int]
) -> EvalReport:
    """Exact EvalReport from per-group correct/total counts."""
    if any(n <= 0 for n in group_counts):
        empty = [g for g, n in enumerate(group_counts) if n <= 0]
        raise EvaluationError(f"empty group(s) {empty} in the evaluation split")
    acc = [Fraction(c, n) for c, n in zip(group_correct, group_counts)]
    overall = Fraction(sum(group_correct), sum(group_counts))
    try:
        di = disparate_impact(acc, group_counts)
    except DegenerateMetricError:
        di = math.nan
    return EvalReport(
        overall_acc=float(overall),
        group_acc=tuple(float(a) for a in acc),
        unfairness=unfairness_score(acc, overall),
        di=di,
        spd=statistical_parity_difference(acc, group_counts),
        group_counts=tuple(int(n) for n in group_counts),
        group_correct=tuple(int(c) for c in group_correct),
    )


def report_from_accuracies(
    group_acc: Sequence[RationalLike],
    group_counts: Sequence[int],
    overall_acc: RationalLike | None = None,
) -> EvalReport:
    """EvalReport from accuracy figures (e.g. published tables or surrogate
    entries). The overall accuracy defaults to the count-weighted mean."""
    if any(n <= 0 for n in group_counts):
        raise EvaluationError("group counts must be positive")
    acc = [_to_fraction(a) for a in group_acc]
    if overall_acc is None:
        total = sum(group_counts)
        overall = sum(a * n for a, n in zip(acc, group_counts)) / total
    else:
        overall = _to_fraction(overall_acc)
    try:
        di = disparate_impact(acc, group_counts)
    except DegenerateMetricError:
        di = math.nan
    return EvalReport(
        overall_acc=float(overall),
        group_acc=tuple(float(a) for a in acc),
        unfairness=unfairness_score(acc, overall),
        di=di,
        spd=statistical_parity_difference(acc, group_counts),
        group_counts=tuple(int(n) for n in group_counts),
    )


def evaluate(net, ds_val, batch_size: int = 256) -> EvalReport:
    """Evaluate a trained network on a grouped validation set.

    Predictions are the argmax of the logits; numpy breaks ties toward the
    lowest class index, which we rely on for determinism.
    """
    sizes = ds_val.group_sizes
    if any(n == 0 for n in sizes):
        empty = [g for g, n in enumerate(sizes) if n == 0]
        raise EvaluationError(f"empty group(s) {empty} in the validation split")
    preds = np.empty(len(ds_val), dtype=np.int64)
    for start in range(0, len(ds_val), batch_size):
        logits = net.forward(ds_val.features[start : start + batch_size])
        preds[start : start + logits.shape[0]] = np.argmax(logits, axis=1)
    correct = preds == ds_val.labels
    group_correct = [int(correct[ds_val.groups == g].sum()) for g in range(ds_val.num_groups)]
    return report_from_group_stats(group_correct, sizes)
