import math

import numpy as np
import pytest

from retpop.pop import oracle_blockwise_forward
from retpop.world_model import (
    TokenHistogramPolicy,
    TokenTrajectory,
    TrainOutput,
    UniformPolicy,
    VocabularyError,
    WorldModelBundle,
    cross_entropy,
    embed_blocks,
    embed_trajectory,
    expected_calls,
    imagine_rollout,
    imagine_step,
    init_bundle,
    sample_categorical,
    summarize_context,
    train_forward,
    wm_loss,
)

from conftest import small_config
from oracles import naive_embed, naive_stack, rel_err


def random_traj(rng, bundle, T):
    c = bundle.config
    return TokenTrajectory(
        rng.integers(0, c.vocab_size, (T, c.tokens_per_obs)),
        rng.integers(0, c.n_actions, T),
        rng.choice([-1.0, 0.0, 1.0], T),
        np.zeros(T, dtype=int),
    )


# embedding

def test_one_block_gives_k_plus_one_rows(bundle, rng):
    (chunk,) = embed_trajectory(random_traj(rng, bundle, 1), bundle)
    assert chunk.shape == (5, 16)


def test_identical_blocks_identical_rows(bundle):
    traj = TokenTrajectory(np.tile([[1, 2, 3, 4]], (2, 1)), [2, 2])
    (chunk,) = embed_trajectory(traj, bundle)
    np.testing.assert_array_equal(chunk[:5], chunk[5:])


def test_embedding_matches_lookup_oracle(rng):
    b = init_bundle(small_config(d_embed=6), seed=1)
    traj = random_traj(rng, b, 3)
    assert b.embed_adapter.shape == (6, 16)
    np.testing.assert_allclose(embed_blocks(b, traj.obs, traj.actions), naive_embed(b, traj.obs, traj.actions),
                               rtol=1e-14)


def test_chunks_hold_whole_blocks(bundle, rng):
    chunks = embed_trajectory(random_traj(rng, bundle, 5), bundle, blocks_per_chunk=2)
    assert [c.shape[0] for c in chunks] == [10, 10, 5]


def test_out_of_vocabulary_names_position(bundle, rng):
    traj = random_traj(rng, bundle, 2)
    traj.obs[1, 2] = bundle.config.vocab_size
    with pytest.raises(VocabularyError, match=r"\(1, 2\)"):
        embed_trajectory(traj, bundle)
    traj = random_traj(rng, bundle, 2)
    traj.actions[0] = -1
    with pytest.raises(VocabularyError):
        embed_trajectory(traj, bundle)


# training forward

def test_train_forward_shapes_at_reference_sizes(rng):
    b = init_bundle(small_config(n_layers=1, tokens_per_obs=64, vocab_size=512), seed=0)
    out = train_forward(random_traj(rng, b, 10), b)
    assert out.obs_logits.shape == (10, 64, 512)
    assert out.reward_out.shape == (10, 3) and out.done_logits.shape == (10, 2)


def test_train_forward_matches_oracle_heads(bundle, rng):
    traj = random_traj(rng, bundle, 7)
    out = train_forward(traj, bundle)
    x = embed_blocks(bundle, traj.obs, traj.actions)
    for t in range(1, 8):
        ref = oracle_blockwise_forward(bundle.stack, x, bundle.pred_tokens, t) @ bundle.obs_head
        assert rel_err(out.obs_logits[t - 1], ref) < 1e-7


def test_train_forward_tail_heads_match_naive_stack(bundle, rng):
    traj = random_traj(rng, bundle, 4)
    out = train_forward(traj, bundle)
    y, _ = naive_stack(bundle.stack, naive_embed(bundle, traj.obs, traj.actions))
    tails = y[bundle.K::bundle.K + 1]
    assert rel_err(out.reward_out, tails @ bundle.reward_head) < 1e-10
    assert rel_err(out.done_logits, tails @ bundle.done_head) < 1e-10


@pytest.mark.parametrize("bpc", [1, 2, 5, 10])
def test_train_forward_chunking_invariant(bundle, rng, bpc):
    traj = random_traj(np.random.default_rng(3), bundle, 10)
    ref = train_forward(traj, bundle, blocks_per_chunk=10)
    out = train_forward(traj, bundle, blocks_per_chunk=bpc)
    assert rel_err(out.obs_logits, ref.obs_logits) < 1e-7
    assert rel_err(out.reward_out, ref.reward_out) < 1e-7


def test_train_forward_empty(bundle):
    with pytest.raises(ValueError):
        train_forward(TokenTrajectory(np.zeros((0, 4), int), []), bundle)


def test_prediction_rows_are_causal(bundle, rng):
    traj = random_traj(rng, bundle, 4)
    base = train_forward(traj, bundle).obs_logits
    for k in range(bundle.K - 1):
        pred = bundle.pred_tokens.copy()
        pred[k + 1:] += rng.normal(size=pred[k + 1:].shape) * 5
        moved = WorldModelBundle(bundle.stack, bundle.codebook, bundle.action_table, pred,
                                 bundle.obs_head, bundle.reward_head, bundle.done_head)
        out = train_forward(traj, moved).obs_logits
        assert np.abs(out[:, :k + 1] - base[:, :k + 1]).max() <= 1e-12
        assert np.abs(out[:, k + 1:] - base[:, k + 1:]).max() > 1e-6


# losses

def test_uniform_ce_is_log_n():
    logits = np.zeros((10, 64, 512))
    targets = np.random.default_rng(0).integers(0, 512, (10, 64))
    assert abs(cross_entropy(logits, targets) - math.log(512)) < 1e-9
    assert abs(math.log(512) - 6.2383246250) < 1e-10


def test_one_hot_ce_vanishes():
    targets = np.array([[3, 0, 511]])
    logits = np.zeros((1, 3, 512))
    np.put_along_axis(logits, targets[..., None], 1e9, axis=-1)
    assert cross_entropy(logits, targets) < 1e-9


def test_mse_reward_loss():
    out = TrainOutput(np.zeros((1, 2, 3)), np.array([[0.5]]), np.zeros((1, 2)), [])
    targets = TokenTrajectory(np.zeros((1, 2), int), [0], [1.0], [0])
    obs_ce, reward_loss, done_ce = wm_loss(out, targets, "mse")
    assert reward_loss == 0.25
    assert abs(obs_ce - math.log(3)) < 1e-12 and abs(done_ce - math.log(2)) < 1e-12


def test_categorical_reward_loss(bundle, rng):
    traj = random_traj(rng, bundle, 3)
    out = train_forward(traj, bundle)
    _, reward_loss, _ = wm_loss(out, traj)
    logp = out.reward_out - np.log(np.exp(out.reward_out).sum(axis=1, keepdims=True))
    ref = -np.mean([logp[t, int(traj.rewards[t]) + 1] for t in range(3)])
    assert abs(reward_loss - ref) < 1e-12


def test_wm_loss_unknown_mode(bundle, rng):
    traj = random_traj(rng, bundle, 1)
    with pytest.raises(ValueError):
        wm_loss(train_forward(traj, bundle), traj, "hinge")


# context

def test_summarize_matches_train_states(bundle, rng):
    traj = random_traj(rng, bundle, 5)
    states = summarize_context(traj, bundle)
    for a, b in zip(states, train_forward(traj, bundle).states):
        assert rel_err(a, b) <= 1e-12


def test_summarize_one_block_matches_naive(bundle, rng):
    traj = random_traj(rng, bundle, 1)
    _, ref = naive_stack(bundle.stack, naive_embed(bundle, traj.obs, traj.actions))
    for a, b in zip(summarize_context(traj, bundle), ref):
        assert rel_err(a, b) < 1e-12


def test_summarize_deterministic_and_nonempty(bundle, rng):
    traj = random_traj(rng, bundle, 2)
    for a, b in zip(summarize_context(traj, bundle), summarize_context(traj, bundle)):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        summarize_context(TokenTrajectory(np.zeros((0, 4), int), []), bundle)


# stepping

def _step_inputs(bundle, rng):
    ctx = random_traj(rng, bundle, 3)
    states = [s[None] for s in summarize_context(ctx[:2], bundle)]
    return states, (ctx.obs[2:3], ctx.actions[2:3])


def test_step_call_costs(bundle, rng):
    states, prev = _step_inputs(bundle, rng)
    K = bundle.K
    d = imagine_step(bundle, states, prev, 2, "default", 0.0)
    c = imagine_step(bundle, states, prev, 2, "combined", 0.0)
    o = imagine_step(bundle, states, prev, 2, "oracle", 0.0)
    assert (d.calls, d.costs) == (2, [K + 1, K])
    assert (c.calls, c.costs) == (1, [2 * K + 1])
    assert o.calls == K and sum(o.costs) == 2 * K + 1


def test_step_modes_agree(bundle, rng):
    states, prev = _step_inputs(bundle, rng)
    d = imagine_step(bundle, states, prev, 2, "default", 0.0)
    for mode in ("combined", "oracle"):
        s = imagine_step(bundle, states, prev, 2, mode, 0.0)
        np.testing.assert_array_equal(s.obs_tokens, d.obs_tokens)
        np.testing.assert_array_equal(s.reward, d.reward)
        np.testing.assert_array_equal(s.done, d.done)
        assert rel_err(s.obs_logits, d.obs_logits) < 1e-7
        for a, b in zip(s.states, d.states):
            assert rel_err(a, b) <= 1e-12


def test_small_temperature_is_greedy(rng):
    logits = rng.normal(size=(50, 9))
    out = sample_categorical(logits, 1e-9, np.random.default_rng(0))
    np.testing.assert_array_equal(out, logits.argmax(axis=-1))
    np.testing.assert_array_equal(sample_categorical(logits, 0.0, None), logits.argmax(axis=-1))


def test_sampling_frequencies(rng):
    logits = np.array([1.0, 0.0, -1.0, 2.0])
    draws = sample_categorical(np.tile(logits, (100_000, 1)), 0.5, np.random.default_rng(2))
    p = np.exp(logits / 0.5) / np.exp(logits / 0.5).sum()
    freq = np.bincount(draws, minlength=4) / draws.size
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / draws.size) + 1e-12)


def test_step_errors(bundle, rng):
    states, prev = _step_inputs(bundle, rng)
    with pytest.raises(ValueError):
        imagine_step(bundle, states, prev, 2, "sideways")
    with pytest.raises(ValueError):
        imagine_step(bundle, states, None, 2, "combined")
    out = imagine_step(bundle, states, None, 2, "default", 0.0)
    assert out.calls == 1 and out.reward is None


def test_teacher_forced_steps_match_train_forward(bundle, rng):
    traj = random_traj(rng, bundle, 6)
    ref = train_forward(traj, bundle)
    states = bundle.stack.zero_states((1,))
    for t in range(6):
        step = imagine_step(bundle, states, (traj.obs[t:t + 1], traj.actions[t:t + 1]), t, "default", 0.0)
        assert rel_err(step.reward_out[0], ref.reward_out[t]) < 1e-7
        assert rel_err(step.done_logits[0], ref.done_logits[t]) < 1e-7
        if t + 1 < 6:
            assert rel_err(step.obs_logits[0], ref.obs_logits[t + 1]) < 1e-7
        states = step.states


# rollouts

@pytest.mark.parametrize("H", [1, 5, 10])
@pytest.mark.parametrize("K", [4, 16, 64])
def test_call_count_closed_forms(H, K):
    b = init_bundle(small_config(n_layers=1, d_model=8, d_ffn=8, n_heads=1, tokens_per_obs=K), seed=0)
    ctx = TokenTrajectory(np.zeros((2, K), int), [0, 1])
    for mode, want in (("default", 2 * H), ("combined", H), ("oracle", K * H)):
        tr = imagine_rollout(b, ctx, UniformPolicy(3), H, mode, temperature=0.0)
        assert tr.sequential_call_count == want == expected_calls(mode, H, K)
        assert len(tr.call_costs) == want


def test_reference_counts():
    assert expected_calls("default", 10, 64) == 20
    assert expected_calls("oracle", 10, 64) == 640


@pytest.mark.parametrize("temperature", [0.0, 0.5])
def test_rollout_modes_identical(bundle, rng, temperature):
    ctx = [random_traj(rng, bundle, 2) for _ in range(3)]
    policy = TokenHistogramPolicy(12, 3, seed=1)
    traces = [imagine_rollout(bundle, ctx, policy, 6, m, temperature, seed=4) for m in ("default", "combined", "oracle")]
    for tr in traces[1:]:
        for name in ("obs", "actions", "rewards", "dones"):
            np.testing.assert_array_equal(getattr(tr, name), getattr(traces[0], name))
        assert rel_err(tr.obs_logits, traces[0].obs_logits) < 1e-7


def always_one(obs, history):
    return np.tile([0.0, 1.0, 0.0], (obs.shape[0], 1))


@pytest.mark.parametrize("mode", ["default", "combined", "oracle"])
def test_rollout_batch_matches_singles(bundle, rng, mode):
    ctx = [random_traj(rng, bundle, 2) for _ in range(3)]
    both = imagine_rollout(bundle, ctx, always_one, 3, mode, temperature=0.0)
    for i in range(3):
        one = imagine_rollout(bundle, ctx[i], always_one, 3, mode, temperature=0.0)
        np.testing.assert_array_equal(both.obs[i], one.obs[0])
        assert rel_err(both.obs_logits[i], one.obs_logits[0]) < 1e-12


def test_rollout_single_block_context(bundle, rng):
    tr = imagine_rollout(bundle, random_traj(rng, bundle, 1), UniformPolicy(3), 2)
    assert tr.obs.shape == (1, 3, 4) and tr.trajectory(0).obs.shape == (2, 4)


def test_rollout_continues_past_done(rng):
    b = init_bundle(small_config(), seed=0)
    b.done_head[:, 1] += 10.0
    b.done_head[:, 0] -= 10.0
    tr = imagine_rollout(b, random_traj(rng, b, 2), UniformPolicy(3), 4, temperature=0.0)
    first = int(np.argmax(tr.dones[0]))
    assert tr.dones[0, first] == 1 and first < 3
    assert tr.horizon == 4 and tr.obs.shape[1] == 5


def test_invalid_policy(bundle, rng):
    ctx = random_traj(rng, bundle, 2)
    with pytest.raises(ValueError):
        imagine_rollout(bundle, ctx, lambda obs, hist: np.full((1, 3), 0.5), 2)
    with pytest.raises(ValueError):
        imagine_rollout(bundle, ctx, lambda obs, hist: np.array([[1.5, -0.5, 0.0]]), 2)
    with pytest.raises(ValueError):
        imagine_rollout(bundle, ctx, UniformPolicy(3), 0)
