"""Token-based world model: embedding, training-mode forward, and imagination.

Token ids are 0-based everywhere in this package. An interaction step is a
*block* of ``K`` observation tokens followed by one action token; block ``t``
(0-based) occupies absolute positions ``t*(K+1) .. t*(K+1)+K``.

Imagination supports three generation modes with different sequential call
counts per imagined step:

``default``
    two calls: consume the previous block, then run the prediction bank.
``combined``
    one call over ``[previous block | prediction bank]`` using the POP
    backbone, so the bank never enters the returned state.
``oracle``
    one call per observation token: the bank is walked token by token with
    the recurrent form (the first call also consumes the previous block).

All three evaluate the same distribution, so greedy rollouts agree token for
token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .pop import pop_chunkwise_forward
from .retnet import LayerStates, ModelConfig, StackParams, init_stack, stack_forward, stack_forward_chunkwise

LOGIT_CAP = 30.0
GEN_MODES = ("default", "combined", "oracle")
REWARD_VALUES = np.array([-1.0, 0.0, 1.0])


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    obs_tokens: np.ndarray
    action: int
    reward: float = 0.0
    done: int = 0


@dataclass
class TokenTrajectory:
    """A sequence of blocks stored column-wise."""

    obs: np.ndarray  # (T, K) int
    actions: np.ndarray  # (T,) int
    rewards: np.ndarray = None  # (T,) float
    dones: np.ndarray = None  # (T,) int

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.int64)
        if self.obs.ndim != 2:
            raise ValueError(f"obs must be (T, K), got {self.obs.shape}")
        T = self.obs.shape[0]
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(T)
        self.rewards = np.zeros(T) if self.rewards is None else np.asarray(self.rewards, dtype=np.float64).reshape(T)
        self.dones = np.zeros(T, dtype=np.int64) if self.dones is None else np.asarray(self.dones, dtype=np.int64).reshape(T)
        if np.any((self.dones != 0) & (self.dones != 1)):
            raise ValueError("done flags must be 0 or 1")

    @classmethod
    def from_blocks(cls, blocks: Sequence[Block]) -> "TokenTrajectory":
        if not blocks:
            raise ValueError("empty block list")
        return cls(
            np.stack([np.asarray(b.obs_tokens) for b in blocks]),
            [b.action for b in blocks],
            [b.reward for b in blocks],
            [b.done for b in blocks],
        )

    @property
    def K(self) -> int:
        return self.obs.shape[1]

    def __len__(self) -> int:
        return self.obs.shape[0]

    def __getitem__(self, idx) -> "TokenTrajectory":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1 if idx != -1 else None)
        return TokenTrajectory(self.obs[idx], self.actions[idx], self.rewards[idx], self.dones[idx])

    def blocks(self) -> list[Block]:
        return [Block(self.obs[t].copy(), int(self.actions[t]), float(self.rewards[t]), int(self.dones[t]))
                for t in range(len(self))]

    def concat(self, other: "TokenTrajectory") -> "TokenTrajectory":
        return TokenTrajectory(
            np.concatenate([self.obs, other.obs]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.rewards, other.rewards]),
            np.concatenate([self.dones, other.dones]),
        )

    def equals(self, other: "TokenTrajectory") -> bool:
        return (
            self.obs.shape == other.obs.shape
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.dones, other.dones)
        )


@dataclass
class WorldModelBundle:
    stack: StackParams
    codebook: np.ndarray  # (N, d_embed), shared with the tokenizer, never modified here
    action_table: np.ndarray  # (A, d_model)
    pred_tokens: np.ndarray  # (K, d_model)
    obs_head: np.ndarray  # (d_model, N)
    reward_head: np.ndarray  # (d_model, 3) categorical or (d_model, 1) mse
    done_head: np.ndarray  # (d_model, 2)
    embed_adapter: np.ndarray | None = None  # (d_embed, d_model); None means identity

    @property
    def config(self) -> ModelConfig:
        return self.stack.config

    @property
    def K(self) -> int:
        return self.config.tokens_per_obs

    @property
    def dtype(self):
        return self.stack.dtype

    def astype(self, dtype) -> "WorldModelBundle":
        cast = lambda a: None if a is None else a.astype(dtype)
        return WorldModelBundle(
            self.stack.astype(dtype), cast(self.codebook), cast(self.action_table), cast(self.pred_tokens),
            cast(self.obs_head), cast(self.reward_head), cast(self.done_head), cast(self.embed_adapter),
        )


def init_bundle(config: ModelConfig, seed: int = 0, codebook: np.ndarray | None = None,
                std: float = 0.02, dtype=np.float64) -> WorldModelBundle:
    """Seeded random world model. The codebook defaults to unit-Gaussian rows."""
    rng = np.random.default_rng([seed, 1])
    c = config
    d_embed = c.embed_dim
    if codebook is None:
        codebook = rng.normal(0.0, 1.0, (c.vocab_size, d_embed))
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.shape != (c.vocab_size, d_embed):
        raise ValueError(f"codebook must be ({c.vocab_size}, {d_embed}), got {codebook.shape}")
    adapter = None if d_embed == c.d_model else rng.normal(0.0, 1.0 / np.sqrt(d_embed), (d_embed, c.d_model))
    r_dim = 3 if c.reward_mode == "categorical" else 1
    bundle = WorldModelBundle(
        stack=init_stack(c, seed=seed, std=std),
        codebook=codebook,
        action_table=rng.normal(0.0, 1.0, (c.n_actions, c.d_model)),
        pred_tokens=rng.normal(0.0, 1.0, (c.tokens_per_obs, c.d_model)),
        obs_head=rng.normal(0.0, std, (c.d_model, c.vocab_size)),
        reward_head=rng.normal(0.0, std, (c.d_model, r_dim)),
        done_head=rng.normal(0.0, std, (c.d_model, 2)),
        embed_adapter=adapter,
    )
    return bundle if dtype == np.float64 else bundle.astype(dtype)


# ---------------------------------------------------------------------------
# embedding


def _check_tokens(bundle: WorldModelBundle, obs, actions):
    c = bundle.config
    if obs.shape[-1] != c.tokens_per_obs:
        raise ValueError(f"expected {c.tokens_per_obs} observation tokens per block, got {obs.shape[-1]}")
    bad = (obs < 0) | (obs >= c.vocab_size)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise VocabularyError(f"observation token {obs[where]} at position {where} outside [0, {c.vocab_size})")
    bad = (actions < 0) | (actions >= c.n_actions)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise VocabularyError(f"action {actions[where]} at position {where} outside [0, {c.n_actions})")


def embed_obs(bundle: WorldModelBundle, obs) -> np.ndarray:
    vecs = bundle.codebook[obs].astype(bundle.dtype, copy=False)
    if bundle.embed_adapter is not None:
        vecs = vecs @ bundle.embed_adapter
    return vecs


def embed_blocks(bundle: WorldModelBundle, obs, actions) -> np.ndarray:
    """``(..., T, K)`` tokens and ``(..., T)`` actions to ``(..., T*(K+1), d_model)``."""
    obs = np.asarray(obs, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    _check_tokens(bundle, obs, actions)
    rows = np.concatenate([embed_obs(bundle, obs), bundle.action_table[actions][..., None, :]], axis=-2)
    return rows.reshape(rows.shape[:-3] + (-1, rows.shape[-1]))


def embed_trajectory(traj: TokenTrajectory, bundle: WorldModelBundle,
                     blocks_per_chunk: int | None = None) -> list[np.ndarray]:
    """Embed a trajectory and group it into chunks of whole blocks."""
    bpc = bundle.config.blocks_per_chunk if blocks_per_chunk is None else blocks_per_chunk
    x = embed_blocks(bundle, traj.obs, traj.actions)
    size = bpc * bundle.config.block_len
    return [x[i:i + size] for i in range(0, x.shape[0], size)]


# ---------------------------------------------------------------------------
# training-mode forward and losses


@dataclass
class TrainOutput:
    obs_logits: np.ndarray  # (T, K, N): block t's tokens predicted from blocks < t
    reward_out: np.ndarray  # (T, R)
    done_logits: np.ndarray  # (T, 2)
    states: LayerStates


def train_forward(segment: TokenTrajectory, bundle: WorldModelBundle,
                  blocks_per_chunk: int | None = None,
                  initial: LayerStates | None = None) -> TrainOutput:
    if len(segment) == 0:
        raise ValueError("empty segment")
    chunks = embed_trajectory(segment, bundle, blocks_per_chunk)
    states = initial
    offset = 0
    obs_out, tails = [], []
    for chunk in chunks:
        res = pop_chunkwise_forward(bundle.stack, chunk, bundle.pred_tokens, states, offset)
        obs_out.append(res.obs_outputs)
        tails.append(res.tail_outputs)
        states = res.states
        offset += chunk.shape[0]
    obs_out = np.concatenate(obs_out)
    tails = np.concatenate(tails)
    return TrainOutput(obs_out @ bundle.obs_head, tails @ bundle.reward_head, tails @ bundle.done_head, states)


def cap_logits(logits):
    return np.clip(logits, -LOGIT_CAP, LOGIT_CAP)


def cross_entropy(logits, targets) -> float:
    """Mean cross-entropy of integer ``targets`` under capped ``logits``."""
    logp = log_softmax(cap_logits(np.asarray(logits, dtype=np.float64)), axis=-1)
    picked = np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)
    return float(-picked.mean())


def reward_class(rewards) -> np.ndarray:
    """Reward sign as a class index over (-1, 0, +1)."""
    return (np.sign(rewards) + 1).astype(np.int64)


def wm_loss(outputs: TrainOutput, targets: TokenTrajectory, reward_mode: str = "categorical"):
    """Returns ``(obs_ce, reward_loss, done_ce)`` averaged over the segment."""
    if outputs.obs_logits.shape[:2] != targets.obs.shape:
        raise ValueError(f"logits {outputs.obs_logits.shape} do not match targets {targets.obs.shape}")
    obs_ce = cross_entropy(outputs.obs_logits, targets.obs)
    done_ce = cross_entropy(outputs.done_logits, targets.dones)
    if reward_mode == "categorical":
        reward_loss = cross_entropy(outputs.reward_out, reward_class(targets.rewards))
    elif reward_mode == "mse":
        reward_loss = float(np.mean((outputs.reward_out[..., 0] - targets.rewards) ** 2))
    else:
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    return obs_ce, reward_loss, done_ce


# ---------------------------------------------------------------------------
# imagination


def summarize_context(context: TokenTrajectory, bundle: WorldModelBundle,
                      blocks_per_chunk: int | None = None) -> LayerStates:
    """States after a chunkwise pass over the context blocks, from zero."""
    if len(context) == 0:
        raise ValueError("empty context")
    _, states = stack_forward_chunkwise(bundle.stack, embed_trajectory(context, bundle, blocks_per_chunk))
    return states


def _summarize_batch(bundle: WorldModelBundle, obs, actions) -> LayerStates:
    # obs (b, T, K) -> states with batch dim b
    x = embed_blocks(bundle, obs, actions)
    size = bundle.config.blocks_per_chunk * bundle.config.block_len
    chunks = [x[:, i:i + size] for i in range(0, x.shape[1], size)]
    _, states = stack_forward_chunkwise(bundle.stack, chunks)
    return states


def sample_categorical(logits, temperature: float, rng: np.random.Generator | None):
    """Sample indices along the last axis of capped logits.

    ``temperature == 0`` is the greedy limit (lowest index on ties). Otherwise
    one uniform per row is drawn, in column-major order over the leading
    axes' last dimension first, so a batch sampled slot by slot consumes the
    generator identically to one sampled all at once.
    """
    logits = cap_logits(np.asarray(logits, dtype=np.float64))
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature == 0:
        return np.argmax(logits, axis=-1)
    if rng is None:
        raise ValueError("stochastic sampling needs a generator")
    probs = softmax(logits / temperature, axis=-1)
    lead = probs.shape[:-1]
    u = rng.random(lead[::-1]).T if lead else rng.random()
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _read_reward(bundle: WorldModelBundle, reward_out, temperature, rng):
    if bundle.config.reward_mode == "mse":
        return reward_out[..., 0].astype(np.float64)
    return REWARD_VALUES[sample_categorical(reward_out, temperature, rng)]


@dataclass
class StepResult:
    obs_tokens: np.ndarray  # (b, K)
    obs_logits: np.ndarray  # (b, K, N)
    reward: np.ndarray | None  # (b,)
    done: np.ndarray | None
    reward_out: np.ndarray | None
    done_logits: np.ndarray | None
    states: LayerStates
    calls: int
    costs: list[int]


def imagine_step(bundle: WorldModelBundle, states: LayerStates, prev_block, block_index: int,
                 mode: str = "default", temperature: float = 0.5,
                 rng: np.random.Generator | None = None) -> StepResult:
    """Advance imagination by one step for a batch of ``b`` rollouts.

    ``prev_block`` is ``(obs (b, K), actions (b,))`` sitting at block
    ``block_index``; ``states`` summarize all blocks before it. The next
    observation is generated for block ``block_index + 1``. With
    ``prev_block=None`` (only allowed in ``default`` mode) the states already
    summarize blocks ``< block_index`` and only the prediction call runs,
    generating block ``block_index`` with no reward or termination.
    """
    if mode not in GEN_MODES:
        raise ValueError(f"unknown generation mode {mode!r}; expected one of {GEN_MODES}")
    params = bundle.stack
    K = bundle.K
    L = bundle.config.block_len
    b = states[0].shape[0]
    pred = np.broadcast_to(bundle.pred_tokens, (b, K, bundle.config.d_model))
    reward = done = reward_out = done_logits = None

    if prev_block is None:
        if mode != "default":
            raise ValueError(f"mode {mode!r} needs the previous block")
        out, _ = stack_forward(params, pred, states, block_index * L)
        logits = out @ bundle.obs_head
        tokens = sample_categorical(logits, temperature, rng)
        return StepResult(tokens, logits, None, None, None, None, states, 1, [K])

    obs, actions = np.asarray(prev_block[0]), np.asarray(prev_block[1])
    if obs.shape != (b, K) or actions.shape != (b,):
        raise ValueError(f"previous block must be obs ({b}, {K}) and actions ({b},), got {obs.shape} and {actions.shape}")
    x = embed_blocks(bundle, obs[:, None], actions[:, None])  # (b, K+1, d)
    offset = block_index * L
    if mode == "combined":
        res = pop_chunkwise_forward(params, x, bundle.pred_tokens, states, offset, lookahead=True)
        tail = res.tail_outputs[:, 0]
        reward_out, done_logits = tail @ bundle.reward_head, tail @ bundle.done_head
        reward = _read_reward(bundle, reward_out, temperature, rng)
        done = sample_categorical(done_logits, temperature, rng)
        logits = res.obs_outputs[:, 0] @ bundle.obs_head
        tokens = sample_categorical(logits, temperature, rng)
        return StepResult(tokens, logits, reward, done, reward_out, done_logits, res.states, 1, [2 * K + 1])

    out, states = stack_forward(params, x, states, offset)
    tail = out[:, K]
    reward_out, done_logits = tail @ bundle.reward_head, tail @ bundle.done_head
    reward = _read_reward(bundle, reward_out, temperature, rng)
    done = sample_categorical(done_logits, temperature, rng)
    next_offset = offset + L

    if mode == "default":
        out, _ = stack_forward(params, pred, states, next_offset)
        logits = out @ bundle.obs_head
        tokens = sample_categorical(logits, temperature, rng)
        return StepResult(tokens, logits, reward, done, reward_out, done_logits, states, 2, [K + 1, K])

    # oracle: one prediction token per call, recurrent form; the first call
    # also carries the block consumed above
    bank_states = states
    logits = np.empty((b, K, bundle.config.vocab_size), dtype=out.dtype)
    tokens = np.empty((b, K), dtype=np.int64)
    for k in range(K):
        y, bank_states = stack_forward(params, pred[:, k:k + 1], bank_states, next_offset + k, mode="recurrent")
        logits[:, k] = y[:, 0] @ bundle.obs_head
        tokens[:, k] = sample_categorical(logits[:, k], temperature, rng)
    return StepResult(tokens, logits, reward, done, reward_out, done_logits, states, K,
                      [K + 2] + [1] * (K - 1))


def expected_calls(mode: str, horizon: int, K: int) -> int:
    """Sequential world-model calls for a rollout of ``horizon`` steps."""
    return {"default": 2 * horizon, "combined": horizon, "oracle": K * horizon}[mode]


@dataclass
class ImaginationTrace:
    obs: np.ndarray  # (b, H+1, K); obs[:, 0] is the last context observation
    actions: np.ndarray  # (b, H)
    rewards: np.ndarray
    dones: np.ndarray
    obs_logits: np.ndarray  # (b, H, K, N)
    reward_out: np.ndarray
    done_logits: np.ndarray
    sequential_call_count: int
    call_costs: list[int] = field(default_factory=list)
    mode: str = "default"

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def batch(self) -> int:
        return self.actions.shape[0]

    def trajectory(self, i: int = 0) -> TokenTrajectory:
        """Imagined blocks of rollout ``i``; the final observation has no action yet."""
        return TokenTrajectory(self.obs[i, :-1], self.actions[i], self.rewards[i], self.dones[i])


Policy = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _as_batch(context) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(context, TokenTrajectory):
        return context.obs[None], context.actions[None]
    ctxs = list(context)
    if not ctxs or len({(len(c), c.K) for c in ctxs}) != 1:
        raise ValueError("batched contexts must be non-empty and equally shaped")
    return np.stack([c.obs for c in ctxs]), np.stack([c.actions for c in ctxs])


def imagine_rollout(bundle: WorldModelBundle, context, policy: Policy, horizon: int,
                    mode: str = "default", temperature: float = 0.5, seed: int = 0) -> ImaginationTrace:
    """Imagine ``horizon`` steps from a context segment.

    ``context`` is a TokenTrajectory (or a list of equally long ones for a
    batch). Its blocks except the last are summarized into the initial state;
    the last block's observation is the current observation, and its action
    is replaced by the policy's choice. ``policy(obs (b, K), history (b, t))``
    returns action probabilities ``(b, A)``.

    Termination is recorded but does not stop the rollout.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if mode not in GEN_MODES:
        raise ValueError(f"unknown generation mode {mode!r}; expected one of {GEN_MODES}")
    obs_ctx, act_ctx = _as_batch(context)
    b, C, K = obs_ctx.shape
    if K != bundle.K:
        raise ValueError(f"context has {K} tokens per block, model expects {bundle.K}")
    rng = np.random.default_rng(seed)
    states = _summarize_batch(bundle, obs_ctx[:, :-1], act_ctx[:, :-1]) if C > 1 else bundle.stack.zero_states((b,))
    history = act_ctx[:, :-1]
    current = obs_ctx[:, -1]
    block_index = C - 1

    obs_seq, acts, rews, dones, logit_seq, r_out, d_out = [current], [], [], [], [], [], []
    calls, costs = 0, []
    for _ in range(horizon):
        probs = np.asarray(policy(current, history), dtype=np.float64)
        if probs.shape != (b, bundle.config.n_actions) or np.any(probs < 0) \
                or not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6):
            raise ValueError("policy must return a probability distribution over the action set for each rollout")
        u = rng.random(b)
        action = np.minimum((np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
        step = imagine_step(bundle, states, (current, action), block_index, mode, temperature, rng)
        calls += step.calls
        costs.extend(step.costs)
        states = step.states
        current = step.obs_tokens
        history = np.concatenate([history, action[:, None]], axis=1)
        block_index += 1
        obs_seq.append(current)
        acts.append(action)
        rews.append(step.reward)
        dones.append(step.done)
        logit_seq.append(step.obs_logits)
        r_out.append(step.reward_out)
        d_out.append(step.done_logits)

    return ImaginationTrace(
        obs=np.stack(obs_seq, axis=1),
        actions=np.stack(acts, axis=1),
        rewards=np.stack(rews, axis=1),
        dones=np.stack(dones, axis=1),
        obs_logits=np.stack(logit_seq, axis=1),
        reward_out=np.stack(r_out, axis=1),
        done_logits=np.stack(d_out, axis=1),
        sequential_call_count=calls,
        call_costs=costs,
        mode=mode,
    )


class UniformPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def __call__(self, obs, history):
        return np.full((obs.shape[0], self.n_actions), 1.0 / self.n_actions)


class TokenHistogramPolicy:
    """Seeded linear policy on the token histogram of the current observation.

    A stand-in controller: deterministic given its seed, and sensitive to the
    imagined tokens so rollouts in different modes only agree if the tokens do.
    """

    def __init__(self, vocab_size: int, n_actions: int, seed: int = 0, temperature: float = 1.0):
        rng = np.random.default_rng([seed, 7])
        self.weights = rng.normal(0.0, 1.0, (vocab_size, n_actions))
        self.temperature = temperature

    def __call__(self, obs, history):
        counts = np.zeros((obs.shape[0], self.weights.shape[0]))
        np.add.at(counts, (np.arange(obs.shape[0])[:, None], obs), 1.0)
        logits = counts @ self.weights / max(obs.shape[1], 1)
        return softmax(logits / self.temperature, axis=-1)
