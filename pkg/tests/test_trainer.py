"""Trainer tests: the group-weighted loss, its gradient, and the loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biaslessnas.data import SyntheticBiasConfig, generate_synthetic
from biaslessnas.errors import ConfigError, PlanError, WeightingError
from biaslessnas.search_space import BgmSpec, SearchSpaceConfig, fixed_point
from biaslessnas.trainer import TrainConfig, fair_loss, train_child


def logits_batch(seed=0, n=6, classes=3):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, classes)).astype(np.float32)
    labels = rng.integers(0, classes, size=n)
    groups = np.array([0, 1] * (n // 2))
    return logits, labels, groups


# --- fair_loss -------------------------------------------------------------------


def test_equal_ratios_reduce_to_plain_ce_bitwise():
    logits, labels, groups = logits_batch()
    bgm = BgmSpec((0.5, 0.5))
    fair_rep, fair_grad = fair_loss(logits, labels, groups, bgm)
    plain_rep, plain_grad = fair_loss(logits, labels, groups, bgm, plain=True)
    assert fair_rep.loss == plain_rep.loss
    assert np.array_equal(fair_grad, plain_grad)
    assert np.all(fair_rep.weights == 1.0)


def test_minority_weight_is_ratio_of_largest():
    logits, labels, groups = logits_batch()
    rep, _ = fair_loss(logits, labels, groups, BgmSpec((0.75, 0.25)))
    assert np.all(rep.weights[groups == 0] == 1.0)
    assert np.all(rep.weights[groups == 1] == 3.0)


def test_uniform_logits_closed_form():
    n, classes = 4, 5
    logits = np.zeros((n, classes), dtype=np.float32)
    labels = np.arange(n) % classes
    groups = np.array([0, 0, 1, 1])
    rep, _ = fair_loss(logits, labels, groups, BgmSpec((0.75, 0.25)))
    weights = np.array([1.0, 1.0, 3.0, 3.0])
    assert rep.loss == pytest.approx(float(weights.sum() * np.log(classes)), rel=1e-6)


def test_group_decomposition_sums_to_loss():
    logits, labels, groups = logits_batch(seed=3)
    rep, _ = fair_loss(logits, labels, groups, BgmSpec((2 / 3, 1 / 3)))
    assert sum(rep.group_loss) == pytest.approx(rep.loss, rel=1e-6)


def _unsafe_bgm(ratios):
    # bypass validation to probe the weighting error path
    spec = object.__new__(BgmSpec)
    object.__setattr__(spec, "ratios", tuple(ratios))
    return spec


def test_zero_ratio_group_in_batch_rejected():
    logits, labels, _ = logits_batch()
    with pytest.raises(ConfigError):
        BgmSpec((1.0, 0.0))  # zero shares are invalid at construction
    # a spec with no share for a group present in the batch fails at weighting
    with pytest.raises(WeightingError):
        fair_loss(logits, labels, np.array([0, 2] * 3), _unsafe_bgm((0.5, 0.5, 0.0)))


def test_fair_loss_gradient_matches_finite_differences():
    logits, labels, groups = logits_batch(seed=7)
    bgm = BgmSpec((0.75, 0.25))
    logits64 = logits.astype(np.float64)
    _, grad = fair_loss(logits, labels, groups, bgm)
    eps = 1e-5
    max_err = 0.0
    for i in range(logits.shape[0]):
        for j in range(logits.shape[1]):
            for sign in (1,):
                pert = logits64.copy()
                pert[i, j] += eps
                lp, _ = fair_loss(pert, labels, groups, bgm)
                pert[i, j] -= 2 * eps
                lm, _ = fair_loss(pert, labels, groups, bgm)
                fd = (lp.loss - lm.loss) / (2 * eps)
                denom = max(abs(fd), abs(float(grad[i, j])), 1.0)
                max_err = max(max_err, abs(fd - float(grad[i, j])) / denom)
    assert max_err < 1e-4


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(0.1, 10.0), minority=st.floats(0.05, 0.5))
def test_property_weights_scale_invariant(scale, minority):
    # weights depend only on the ratio proportions, not their scale
    logits, labels, groups = logits_batch(seed=11)
    base = (1.0 - minority, minority)
    rep_a, _ = fair_loss(logits, labels, groups, BgmSpec(base))
    rep_b, _ = fair_loss(
        logits, labels, groups, BgmSpec.normalized(tuple(r * scale for r in base))
    )
    assert np.allclose(rep_a.weights, rep_b.weights, rtol=1e-12)


def test_mean_normalize_divides_by_batch():
    logits, labels, groups = logits_batch(seed=5)
    bgm = BgmSpec((0.5, 0.5))
    rep_sum, grad_sum = fair_loss(logits, labels, groups, bgm)
    rep_mean, grad_mean = fair_loss(logits, labels, groups, bgm, mean_normalize=True)
    n = logits.shape[0]
    assert rep_mean.loss == pytest.approx(rep_sum.loss / n, rel=1e-6)
    assert np.allclose(grad_mean, grad_sum / n, atol=1e-7)


# --- TrainConfig -------------------------------------------------------------------


def test_lr_schedule_default_constants():
    cfg = TrainConfig(lr=0.01, lr_decay=0.9, decay_interval=20)
    assert cfg.lr_at(0) == pytest.approx(0.01)
    assert cfg.lr_at(19) == pytest.approx(0.01)
    assert cfg.lr_at(20) == pytest.approx(0.009)
    assert cfg.lr_at(40) == pytest.approx(0.01 * 0.9**2)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)


# --- train_child -------------------------------------------------------------------


def small_setup():
    data_cfg = SyntheticBiasConfig(
        group_counts=(320, 320), shifts=(2.5, 2.5), noise_scales=(0.3, 0.3),
        spatial_size=8, seed=1,
    )
    train, val = generate_synthetic(data_cfg)
    space = SearchSpaceConfig(depth=2, channel_choices=(8,), kernel_choices=(3,))
    return train, val, fixed_point("alt-RB-CB", space)


def test_dataset_smaller_than_batch_rejected():
    train, _, enc = small_setup()
    cfg = TrainConfig(epochs=1, batch_size=4096)
    with pytest.raises(PlanError):
        train_child(enc, BgmSpec((0.5, 0.5)), train, cfg)


def test_training_learns_separable_data():
    # well-separated balanced classes: loss falls and accuracy gets high
    train, val, enc = small_setup()
    cfg = TrainConfig(epochs=25, batch_size=32, seed=0)
    net, trace = train_child(enc, BgmSpec((0.5, 0.5)), train, cfg)
    per_epoch = {}
    for row in trace:
        per_epoch.setdefault(row["epoch"], []).append(row["loss"])
    means = [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]
    assert means[-1] < means[0]
    logits = net.forward(train.features)
    acc = float(np.mean(np.argmax(logits, axis=1) == train.labels))
    assert acc > 0.85


def test_training_deterministic_under_seed():
    train, _, enc = small_setup()
    cfg = TrainConfig(epochs=2, batch_size=32, seed=3)
    net_a, trace_a = train_child(enc, BgmSpec((0.5, 0.5)), train, cfg)
    net_b, trace_b = train_child(enc, BgmSpec((0.5, 0.5)), train, cfg)
    assert trace_a == trace_b
    for k, v in net_a.parameters().items():
        assert np.array_equal(v, net_b.parameters()[k])


def test_equal_ratios_match_plain_trainer_trajectory():
    train, _, enc = small_setup()
    bgm = BgmSpec((0.5, 0.5))
    fair_cfg = TrainConfig(epochs=2, batch_size=32, seed=5, plain_loss=False)
    plain_cfg = TrainConfig(epochs=2, batch_size=32, seed=5, plain_loss=True)
    net_a, _ = train_child(enc, bgm, train, fair_cfg)
    net_b, _ = train_child(enc, bgm, train, plain_cfg)
    for k, v in net_a.parameters().items():
        assert np.array_equal(v, net_b.parameters()[k])


def test_trace_has_lr_schedule():
    train, _, enc = small_setup()
    cfg = TrainConfig(epochs=2, batch_size=32, seed=1, lr=0.01, lr_decay=0.9, decay_interval=2)
    _, trace = train_child(enc, BgmSpec((0.5, 0.5)), train, cfg)
    for row in trace:
        assert row["lr"] == pytest.approx(cfg.lr_at(row["step"]))
