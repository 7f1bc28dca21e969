"""Actor-critic quantities evaluated on imagined trajectories.

Stop-gradients are identities here: nothing in this package differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

GAMMA = 0.995
LAMBDA = 0.95
ENTROPY_WEIGHT = 0.001
COLLECT_EPSILON = 0.01
EVAL_TEMPERATURE = 0.5


def lambda_returns(rewards, dones, values, gamma: float = GAMMA, lam: float = LAMBDA) -> np.ndarray:
    """Backward recursion ``G_t = r_t + gamma (1 - d_t) ((1 - lam) V_{t+1} + lam G_{t+1})``, ``G_H = V_H``.

    ``rewards`` and ``dones`` have length ``H`` on the last axis, ``values``
    has ``H + 1``. Returns ``G_0 .. G_{H-1}``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    H = rewards.shape[-1]
    if dones.shape[-1] != H or values.shape[-1] != H + 1:
        raise ValueError(f"need H rewards/dones and H+1 values, got {rewards.shape}, {dones.shape}, {values.shape}")
    if not 0 < gamma <= 1 or not 0 <= lam <= 1:
        raise ValueError("gamma must lie in (0, 1] and lambda in [0, 1]")
    out = np.empty(np.broadcast_shapes(rewards.shape, dones.shape, values[..., :-1].shape))
    g = values[..., H]
    for t in range(H - 1, -1, -1):
        g = rewards[..., t] + gamma * (1.0 - dones[..., t]) * ((1.0 - lam) * values[..., t + 1] + lam * g)
        out[..., t] = g
    return out


def value_loss(values, returns) -> float:
    """Mean squared difference between value estimates and (fixed) returns."""
    values, returns = np.asarray(values, dtype=np.float64), np.asarray(returns, dtype=np.float64)
    if values.shape != returns.shape:
        raise ValueError(f"length mismatch: {values.shape} vs {returns.shape}")
    return float(np.mean((values - returns) ** 2))


@dataclass(frozen=True)
class PolicyStep:
    action_log_probs: np.ndarray
    chosen_action: int
    ret: float
    baseline: float
    alpha: float = ENTROPY_WEIGHT

    def __post_init__(self):
        lp = np.asarray(self.action_log_probs, dtype=np.float64)
        total = np.exp(lp).sum()
        if not abs(total - 1.0) <= 1e-9:
            raise ValueError(f"action log-probabilities do not normalize (sum of probabilities {total!r})")
        if not 0 <= self.chosen_action < lp.shape[-1]:
            raise ValueError(f"chosen action {self.chosen_action} outside the action set")


def entropy(log_probs) -> np.ndarray:
    p = np.exp(log_probs)
    return -(p * np.where(p > 0, log_probs, 0.0)).sum(axis=-1)


def policy_loss(steps: list[PolicyStep]) -> float:
    """REINFORCE with a value baseline and an entropy bonus, averaged over steps."""
    if not steps:
        raise ValueError("no policy steps")
    terms = []
    for s in steps:
        lp = np.asarray(s.action_log_probs, dtype=np.float64)
        terms.append(-lp[s.chosen_action] * (s.ret - s.baseline) - s.alpha * entropy(lp))
    return float(np.mean(terms))


def policy_loss_from_logits(logits, actions, returns, baselines, alpha: float = ENTROPY_WEIGHT) -> float:
    """Vectorized policy loss; logits are normalized first, so shifts cancel."""
    lp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    actions = np.asarray(actions)
    chosen = np.take_along_axis(lp, actions[..., None], axis=-1)[..., 0]
    adv = np.asarray(returns, dtype=np.float64) - np.asarray(baselines, dtype=np.float64)
    return float(np.mean(-chosen * adv - alpha * entropy(lp)))


def sample_action(logits, temperature: float = EVAL_TEMPERATURE, epsilon: float = 0.0, seed=None):
    """Epsilon-greedy over a temperature-scaled softmax.

    ``seed`` may be an int or a ``numpy.random.Generator``. Temperature 0
    picks the argmax (lowest index on ties). Works on ``(..., A)`` logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] == 0:
        raise ValueError("empty action set")
    if temperature < 0 or not 0 <= epsilon <= 1:
        raise ValueError("temperature must be >= 0 and epsilon in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lead = logits.shape[:-1]
    n = logits.shape[-1]
    if temperature == 0:
        greedy = np.argmax(logits, axis=-1)
    else:
        probs = softmax(logits / temperature, axis=-1)
        u = rng.random(lead)
        greedy = np.minimum((np.cumsum(probs, axis=-1) < np.asarray(u)[..., None]).sum(axis=-1), n - 1)
    if epsilon > 0:
        explore = rng.random(lead) < epsilon
        uniform = rng.integers(0, n, size=lead)
        greedy = np.where(explore, uniform, greedy)
    return int(greedy) if greedy.ndim == 0 else greedy
