"""Controller tests: sampling, the reward rule, and the policy gradient."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biaslessnas.controller import (
    LOGIT_CLAMP,
    ControllerPolicy,
    Episode,
    ReinforceConfig,
    RewardConfig,
    compute_reward,
    grad_check_policy,
    reinforce_update,
)
from biaslessnas.errors import BatchError, CheckpointError, ConfigError
from biaslessnas.evaluator import report_from_accuracies


def report_with(overall, unfairness):
    # a minimal EvalReport carrying the two reward inputs
    rep = report_from_accuracies([overall, overall], [10, 10])
    return type(rep)(
        overall_acc=overall,
        group_acc=rep.group_acc,
        unfairness=unfairness,
        di=rep.di,
        spd=rep.spd,
        group_counts=rep.group_counts,
    )


# --- reward ---------------------------------------------------------------------


def test_reward_weighted_combination():
    cfg = RewardConfig(alpha=0.2, beta=0.8, ac_threshold=0.6)
    r = compute_reward(report_with(0.7951, 0.0779), cfg)
    assert r == pytest.approx(0.2 * 0.7951 - 0.8 * 0.0779, abs=1e-12)
    assert r == pytest.approx(0.09670, abs=1e-9)


def test_reward_below_threshold_is_exactly_minus_one():
    cfg = RewardConfig(alpha=0.2, beta=0.8, ac_threshold=0.6)
    assert compute_reward(report_with(0.50, 0.0), cfg) == -1.0


def test_reward_trivial_extremes():
    cfg = RewardConfig(alpha=0.8, beta=0.2, ac_threshold=0.0)
    assert compute_reward(report_with(1.0, 0.0), cfg) == pytest.approx(0.8)


def test_reward_config_validation():
    with pytest.raises(ConfigError):
        RewardConfig(alpha=0.0, beta=0.0)
    with pytest.raises(ConfigError):
        RewardConfig(ac_threshold=1.5)


@settings(max_examples=100, deadline=None)
@given(
    a1=st.floats(0.6, 1.0),
    a2=st.floats(0.6, 1.0),
    u=st.floats(0.0, 1.0),
    du=st.floats(0.0, 0.5),
)
def test_property_reward_monotone(a1, a2, u, du):
    cfg = RewardConfig(alpha=0.2, beta=0.8, ac_threshold=0.6)
    lo, hi = sorted((a1, a2))
    assert compute_reward(report_with(lo, u), cfg) <= compute_reward(
        report_with(hi, u), cfg
    )
    assert compute_reward(report_with(a1, u + du), cfg) <= compute_reward(
        report_with(a1, u), cfg
    )


# --- sampling ---------------------------------------------------------------------


def test_sample_deterministic_under_seed():
    policy = ControllerPolicy((3, 2, 4), hidden=8, seed=7)
    assert policy.sample(123) == policy.sample(123)


def test_sample_distributions_are_valid():
    policy = ControllerPolicy((3, 5, 2), hidden=8, seed=0)
    tokens, log_probs = policy.sample(1)
    dists = policy.step_distributions(tokens)
    for p in dists:
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-6
    # log-prob bookkeeping: exp(log_probs) matches the distribution entries
    for lp, tok, p in zip(log_probs, tokens, dists):
        assert np.exp(lp) == pytest.approx(p[tok], abs=1e-9)


def test_sample_uniform_initial_frequencies():
    # heads start at zero, so the initial slot distribution is uniform;
    # over 10,000 seeded draws each of 2 candidates lands in [0.49, 0.51]
    # (loose 4-sigma band around a fair binomial)
    policy = ControllerPolicy((2,), hidden=8, seed=3)
    counts = np.zeros(2)
    n = 10_000
    for s in range(n):
        tokens, _ = policy.sample(s)
        counts[tokens[0]] += 1
    freq = counts / n
    assert np.all(freq >= 0.47) and np.all(freq <= 0.53)
    assert abs(freq[0] - 0.5) < 0.02


def test_saturated_logit_always_sampled():
    policy = ControllerPolicy((3,), hidden=8, seed=0)
    policy.params["b_o0"][...] = np.array([0.0, 2 * LOGIT_CLAMP, 0.0])
    for s in range(50):
        tokens, _ = policy.sample(s)
        assert tokens[0] == 1


# --- reinforce_update ----------------------------------------------------------------


def make_episodes(policy, rewards, seed0=0):
    eps = []
    for i, r in enumerate(rewards):
        tokens, log_probs = policy.sample(seed0 + i)
        eps.append(Episode(tokens, log_probs, r))
    return eps


def test_zero_update_when_rewards_equal_baseline():
    policy = ControllerPolicy((3, 2), hidden=8, seed=1)
    policy.baseline = 0.25
    before = {k: v.copy() for k, v in policy.params.items()}
    cfg = ReinforceConfig(episode_batch=3, gamma=1.0)
    reinforce_update(policy, make_episodes(policy, [0.25, 0.25, 0.25]), cfg)
    for k, v in policy.params.items():
        assert np.array_equal(v, before[k]), k


def test_positive_advantage_increases_sampled_probability():
    policy = ControllerPolicy((2,), hidden=8, seed=2)
    policy.baseline = 0.0
    tokens, _ = policy.sample(5)
    p_before = policy.step_distributions(tokens)[0][tokens[0]]
    cfg = ReinforceConfig(episode_batch=1, gamma=1.0, learning_rate=0.05)
    reinforce_update(policy, [Episode(tokens, (0.0,), 1.0)], cfg)
    p_after = policy.step_distributions(tokens)[0][tokens[0]]
    assert p_after > p_before


def test_discount_scales_early_steps():
    # with gamma=0.5 and T=2, the step-0 coefficient is 0.5 and step-1 is 1;
    # verified against finite differences of the discounted log-prob sum
    policy = ControllerPolicy((3, 3), hidden=4, seed=4)
    tokens, _ = policy.sample(9)
    v_full, _ = policy.log_prob_grad(tokens, gamma=1.0)
    v_disc, _ = policy.log_prob_grad(tokens, gamma=0.5)
    dists = policy.step_distributions(tokens)
    lp = [float(np.log(d[t])) for d, t in zip(dists, tokens)]
    assert v_full == pytest.approx(lp[0] + lp[1], abs=1e-12)
    assert v_disc == pytest.approx(0.5 * lp[0] + lp[1], abs=1e-12)


def test_batch_size_mismatch_raises():
    policy = ControllerPolicy((2,), hidden=4, seed=0)
    cfg = ReinforceConfig(episode_batch=2)
    with pytest.raises(BatchError):
        reinforce_update(policy, make_episodes(policy, [1.0]), cfg)


def test_baseline_ema_update():
    policy = ControllerPolicy((2,), hidden=4, seed=0)
    cfg = ReinforceConfig(episode_batch=2, baseline_decay=0.9)
    reinforce_update(policy, make_episodes(policy, [1.0, 0.0]), cfg)
    # initialized to the first batch mean, then EMA-stepped toward it
    assert policy.baseline == pytest.approx(0.5)
    reinforce_update(policy, make_episodes(policy, [1.0, 1.0]), cfg)
    assert policy.baseline == pytest.approx(0.9 * 0.5 + 0.1 * 1.0)


# --- gradient checks ----------------------------------------------------------------


def test_grad_check_small_policy():
    policy = ControllerPolicy((3, 2), hidden=4, seed=11)
    tokens, _ = policy.sample(0)
    err = grad_check_policy(policy, tokens, gamma=0.7, eps=1e-5)
    assert err < 1e-4


def test_grad_check_eps_convergence():
    policy = ControllerPolicy((3, 2), hidden=4, seed=12)
    tokens, _ = policy.sample(1)
    err_big = grad_check_policy(policy, tokens, gamma=1.0, eps=1e-4)
    err_small = grad_check_policy(policy, tokens, gamma=1.0, eps=5e-5)
    assert err_small <= err_big + 1e-8


def test_grad_check_rejects_bad_eps():
    policy = ControllerPolicy((2,), hidden=4, seed=0)
    tokens, _ = policy.sample(0)
    with pytest.raises(ConfigError):
        grad_check_policy(policy, tokens, eps=0.0)


def test_entropy_grad_matches_finite_differences():
    policy = ControllerPolicy((3, 2), hidden=4, seed=13)
    tokens, _ = policy.sample(2)
    _, analytic = policy.entropy_grad(tokens)
    eps = 1e-6
    max_err = 0.0
    for name, p in policy.params.items():
        flat = p.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, _ = policy.entropy_grad(tokens)
            flat[i] = orig - eps
            f_minus, _ = policy.entropy_grad(tokens)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            max_err = max(max_err, abs(fd - a[i]) / max(abs(fd), abs(a[i]), 1.0))
    assert max_err < 1e-4


# --- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    policy = ControllerPolicy((3, 2), hidden=4, seed=1)
    policy.baseline = 0.4
    path = tmp_path / "policy.npz"
    policy.save(path)
    other = ControllerPolicy((3, 2), hidden=4, seed=99)
    other.load(path)
    for k in policy.params:
        assert np.array_equal(other.params[k], policy.params[k])
    assert other.baseline == 0.4


def test_checkpoint_schema_mismatch_refused(tmp_path):
    policy = ControllerPolicy((3, 2), hidden=4, seed=1)
    path = tmp_path / "policy.npz"
    policy.save(path)
    with pytest.raises(CheckpointError):
        ControllerPolicy((3, 3), hidden=4, seed=1).load(path)


# --- two-point convergence property ------------------------------------------------------


def test_two_point_convergence():
    # one binary slot: candidate 0 pays 1.0, candidate 1 pays 0.0; the
    # policy's probability of the paying point passes 0.9 within 200
    # updates (m=5, gamma=1), median over 5 seeds
    best = []
    cfg = ReinforceConfig(episode_batch=5, gamma=1.0)
    for seed in range(5):
        policy = ControllerPolicy((2,), hidden=8, seed=seed)
        p_max = 0.0
        for update in range(200):
            episodes = []
            for e in range(5):
                tokens, lps = policy.sample(seed * 100_003 + update * 17 + e)
                episodes.append(Episode(tokens, lps, 1.0 if tokens[0] == 0 else 0.0))
            reinforce_update(policy, episodes, cfg)
            p_max = max(p_max, policy.step_distributions((0,))[0][0])
            if p_max > 0.9:
                break
        best.append(p_max)
    assert float(np.median(best)) > 0.9
