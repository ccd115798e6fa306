"""Recurrent stochastic policy over the joint token sequence.

A single-layer tanh recurrence consumes the embedding of the previously
sampled token and emits per-slot logits. Updates follow the Monte Carlo
policy gradient with a per-step discount gamma**(T-t), a reward baseline
kept as an exponential moving average, and plain gradient ascent.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BatchError, CheckpointError, ConfigError
from .evaluator import EvalReport

LOGIT_CLAMP = 50.0


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.2  # weight on overall accuracy
    beta: float = 0.8  # weight on the unfairness score
    ac_threshold: float = 0.6  # minimum acceptable overall accuracy

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError("need alpha, beta >= 0 with alpha + beta > 0")
        if not 0 <= self.ac_threshold <= 1:
            raise ConfigError("ac_threshold must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown reward keys: {sorted(unknown)}")
        return cls(**d)


def compute_reward(report: EvalReport, cfg: RewardConfig) -> float:
    """alpha*A - beta*U when the accuracy bar is met, otherwise exactly -1."""
    if report.overall_acc >= cfg.ac_threshold:
        return cfg.alpha * report.overall_acc - cfg.beta * report.unfairness
    return -1.0


@dataclass(frozen=True)
class ReinforceConfig:
    episode_batch: int = 5  # m
    steps_per_episode: int | None = None  # T; validated against the schema
    gamma: float = 1.0
    baseline_decay: float = 0.9
    learning_rate: float = 0.7
    entropy_weight: float = 0.0  # optional exploration bonus; off by default

    def __post_init__(self):
        if self.episode_batch < 1:
            raise ConfigError("episode_batch must be >= 1")
        if self.steps_per_episode is not None and self.steps_per_episode < 1:
            raise ConfigError("steps_per_episode must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 < self.baseline_decay < 1:
            raise ConfigError("baseline_decay must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.entropy_weight < 0:
            raise ConfigError("entropy_weight must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ReinforceConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown reinforce keys: {sorted(unknown)}")
        return cls(**d)


class Episode(NamedTuple):
    tokens: tuple[int, ...]
    log_probs: tuple[float, ...]
    reward: float


class ControllerPolicy:
    """Autoregressive token policy; one output head per schema slot.

    Heads start at zero so the initial per-slot distributions are exactly
    uniform; gradients still reach the recurrent core through the heads.
    """

    VERSION = 1

    def __init__(self, slot_sizes: Sequence[int], hidden: int = 32, seed: int = 0):
        if not slot_sizes or any(s < 1 for s in slot_sizes):
            raise ConfigError("slot sizes must be positive")
        self.slot_sizes = tuple(int(s) for s in slot_sizes)
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        h = hidden
        scale = 0.1
        self.params: dict[str, np.ndarray] = {
            "start": rng.uniform(-scale, scale, size=h),
            "W_xh": rng.uniform(-scale, scale, size=(h, h)),
            "W_hh": rng.uniform(-scale, scale, size=(h, h)),
            "b_h": np.zeros(h),
        }
        for t, n in enumerate(self.slot_sizes):
            self.params[f"emb{t}"] = rng.uniform(-scale, scale, size=(n, h))
            self.params[f"W_o{t}"] = np.zeros((h, n))
            self.params[f"b_o{t}"] = np.zeros(n)
        # baseline for REINFORCE; None until the first update batch
        self.baseline: float | None = None

    @property
    def schema_length(self) -> int:
        return len(self.slot_sizes)

    def schema_hash(self) -> str:
        desc = json.dumps({"slots": self.slot_sizes, "hidden": self.hidden})
        return hashlib.sha256(desc.encode()).hexdigest()

    # --- forward passes ------------------------------------------------

    def _step(self, x: np.ndarray, h_prev: np.ndarray, slot: int):
        pre = self.params["W_xh"].T @ x + self.params["W_hh"].T @ h_prev + self.params["b_h"]
        h = np.tanh(pre)
        raw = h @ self.params[f"W_o{slot}"] + self.params[f"b_o{slot}"]
        logits = np.clip(raw, -LOGIT_CLAMP, LOGIT_CLAMP)
        z = logits - logits.max()
        e = np.exp(z)
        probs = e / e.sum()
        return h, logits, raw, probs

    def step_distributions(self, tokens: Sequence[int]) -> list[np.ndarray]:
        """Per-slot distributions along a teacher-forced token path."""
        h = np.zeros(self.hidden)
        x = self.params["start"]
        out = []
        for t, size in enumerate(self.slot_sizes):
            h, _, _, probs = self._step(x, h, t)
            out.append(probs)
            x = self.params[f"emb{t}"][tokens[t]]
        return out

    def sample(self, rng_seed: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
        """Draw one token sequence; deterministic under the seed."""
        rng = np.random.default_rng(rng_seed)
        h = np.zeros(self.hidden)
        x = self.params["start"]
        tokens, log_probs = [], []
        for t, size in enumerate(self.slot_sizes):
            h, _, _, probs = self._step(x, h, t)
            a = int(rng.choice(size, p=probs))
            tokens.append(a)
            log_probs.append(float(np.log(probs[a])))
            x = self.params[f"emb{t}"][a]
        return tuple(tokens), tuple(log_probs)

    # --- gradients -------------------------------------------------------

    def _path_grad(self, tokens: Sequence[int], step_dlogits) -> tuple[float, dict[str, np.ndarray]]:
        """Backprop along a teacher-forced token path.

        ``step_dlogits(t, probs)`` returns (value contribution, dlogits) for
        slot t; the returned total value and parameter gradients cover the
        whole path.
        """
        T = self.schema_length
        if len(tokens) != T:
            raise ConfigError(f"expected {T} tokens, got {len(tokens)}")
        # forward with caches
        hs, xs, raws, probs_list = [], [], [], []
        h = np.zeros(self.hidden)
        x = self.params["start"]
        value = 0.0
        dlogits_list = []
        for t in range(T):
            xs.append(x)
            h, logits, raw, probs = self._step(x, h, t)
            hs.append(h)
            raws.append(raw)
            probs_list.append(probs)
            v_t, dlogits = step_dlogits(t, probs)
            value += v_t
            dlogits_list.append(dlogits)
            x = self.params[f"emb{t}"][tokens[t]]

        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dh_next = np.zeros(self.hidden)
        for t in reversed(range(T)):
            # clamp saturation blocks the gradient
            dlogits = np.where(np.abs(raws[t]) < LOGIT_CLAMP, dlogits_list[t], 0.0)
            grads[f"W_o{t}"] += np.outer(hs[t], dlogits)
            grads[f"b_o{t}"] += dlogits
            dh = self.params[f"W_o{t}"] @ dlogits + dh_next
            dpre = dh * (1.0 - hs[t] ** 2)
            grads["W_xh"] += np.outer(xs[t], dpre)
            h_prev = hs[t - 1] if t > 0 else np.zeros(self.hidden)
            grads["W_hh"] += np.outer(h_prev, dpre)
            grads["b_h"] += dpre
            dx = self.params["W_xh"] @ dpre
            if t > 0:
                grads[f"emb{t - 1}"][tokens[t - 1]] += dx
            else:
                grads["start"] += dx
            dh_next = self.params["W_hh"] @ dpre
        return value, grads

    def log_prob_grad(
        self, tokens: Sequence[int], gamma: float
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Value and gradient of sum_t gamma**(T-t) * log pi(a_t | a_<t)."""
        T = self.schema_length

        def step(t: int, probs: np.ndarray):
            coeff = gamma ** (T - 1 - t)
            dlogits = -coeff * probs
            dlogits[tokens[t]] += coeff
            return coeff * float(np.log(probs[tokens[t]])), dlogits

        return self._path_grad(tokens, step)

    def entropy_grad(self, tokens: Sequence[int]) -> tuple[float, dict[str, np.ndarray]]:
        """Value and gradient of sum_t H(pi(. | a_<t)) along the token path."""

        def step(t: int, probs: np.ndarray):
            logp = np.log(np.maximum(probs, 1e-300))
            ent = -float(probs @ logp)
            dlogits = -probs * (logp + ent)
            return ent, dlogits

        return self._path_grad(tokens, step)

    # --- serialization -----------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": self.VERSION,
            "schema_hash": self.schema_hash(),
            "slots": self.slot_sizes,
            "hidden": self.hidden,
            "baseline": self.baseline,
        }
        np.savez(path, __meta__=np.array(json.dumps(meta)), **self.params)

    def load(self, path) -> None:
        try:
            with np.load(path) as data:
                meta = json.loads(str(data["__meta__"]))
                if meta.get("version") != self.VERSION:
                    raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
                if meta.get("schema_hash") != self.schema_hash():
                    raise CheckpointError("checkpoint schema hash does not match this policy")
                for k in self.params:
                    self.params[k] = np.array(data[k])
                self.baseline = meta["baseline"]
        except (OSError, KeyError, ValueError) as e:
            raise CheckpointError(f"cannot load checkpoint: {e}") from e


def reinforce_update(
    policy: ControllerPolicy, episodes: Sequence[Episode], cfg: ReinforceConfig
) -> float:
    """One gradient-ascent step of the Monte Carlo policy gradient.

    Returns the realized gradient norm. The baseline is initialized to the
    first batch's mean reward and updated as an EMA after the step.
    """
    if len(episodes) != cfg.episode_batch:
        raise BatchError(f"expected {cfg.episode_batch} episodes, got {len(episodes)}")
    rewards = [e.reward for e in episodes]
    if policy.baseline is None:
        policy.baseline = float(np.mean(rewards))
    b = policy.baseline

    total = {k: np.zeros_like(v) for k, v in policy.params.items()}
    for ep in episodes:
        _, g = policy.log_prob_grad(ep.tokens, cfg.gamma)
        advantage = ep.reward - b
        for k in total:
            total[k] += g[k] * advantage
        if cfg.entropy_weight > 0:
            _, ge = policy.entropy_grad(ep.tokens)
            for k in total:
                total[k] += cfg.entropy_weight * ge[k]
    m = len(episodes)
    norm_sq = 0.0
    for k, v in policy.params.items():
        step = total[k] / m
        v += cfg.learning_rate * step
        norm_sq += float((step**2).sum())

    policy.baseline = cfg.baseline_decay * b + (1 - cfg.baseline_decay) * float(np.mean(rewards))
    return float(np.sqrt(norm_sq))


def grad_check_policy(
    policy: ControllerPolicy,
    tokens: Sequence[int],
    gamma: float = 1.0,
    eps: float = 1e-5,
) -> float:
    """Max relative error between the analytic log-prob gradient and central
    finite differences over every parameter."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    _, analytic = policy.log_prob_grad(tokens, gamma)
    max_err = 0.0
    for name, p in policy.params.items():
        flat = p.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, _ = policy.log_prob_grad(tokens, gamma)
            flat[i] = orig - eps
            f_minus, _ = policy.log_prob_grad(tokens, gamma)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            denom = max(abs(fd), abs(a[i]), 1.0)
            max_err = max(max_err, abs(fd - a[i]) / denom)
    return max_err
