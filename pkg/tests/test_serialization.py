import numpy as np
import pytest

from retpop.retnet import init_stack, stack_forward
from retpop.serialization import ModelFormatError, load_bundle, load_stack, save_bundle, save_stack
from retpop.world_model import TokenTrajectory, UniformPolicy, imagine_rollout, init_bundle

from conftest import small_config


def context(config, seed=0):
    rng = np.random.default_rng(seed)
    return TokenTrajectory(rng.integers(0, config.vocab_size, (2, config.tokens_per_obs)),
                           rng.integers(0, config.n_actions, 2))


def test_stack_round_trip(tmp_path, config, rng):
    stack = init_stack(config, seed=3)
    save_stack(stack, tmp_path / "s.rpop")
    back = load_stack(tmp_path / "s.rpop")
    x = rng.normal(size=(9, config.d_model))
    np.testing.assert_array_equal(stack_forward(back, x)[0], stack_forward(stack, x)[0])
    for a, b in zip(stack.layers, back.layers):
        np.testing.assert_array_equal(a.msr.w_q, b.msr.w_q)
        np.testing.assert_array_equal(a.ffn_w2, b.ffn_w2)


@pytest.mark.parametrize("reward_mode", ["categorical", "mse"])
def test_bundle_round_trip(tmp_path, reward_mode):
    config = small_config(reward_mode=reward_mode)
    bundle = init_bundle(config, seed=8)
    save_bundle(bundle, tmp_path / "b.rpop")
    back = load_bundle(tmp_path / "b.rpop")
    policy = UniformPolicy(config.n_actions)
    a = imagine_rollout(bundle, [context(config)], policy, 4, "default", seed=2)
    b = imagine_rollout(back, [context(config)], policy, 4, "default", seed=2)
    for name in ("obs", "actions", "rewards", "dones"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_bad_magic(tmp_path, config):
    save_stack(init_stack(config, seed=0), tmp_path / "s.rpop")
    raw = (tmp_path / "s.rpop").read_bytes()
    (tmp_path / "s.rpop").write_bytes(b"RPOPv2" + raw[6:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_stack(tmp_path / "s.rpop")


def test_truncated(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b.rpop")
    raw = (tmp_path / "b.rpop").read_bytes()
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.rpop").write_bytes(raw[:cut])
        with pytest.raises(ModelFormatError):
            load_bundle(tmp_path / "t.rpop")


def test_trailing_bytes(tmp_path, bundle):
    save_bundle(bundle, tmp_path / "b.rpop")
    with open(tmp_path / "b.rpop", "ab") as f:
        f.write(b"\0" * 8)
    with pytest.raises(ModelFormatError, match="trailing"):
        load_bundle(tmp_path / "b.rpop")


def test_bare_stack_is_not_a_bundle(tmp_path, config):
    save_stack(init_stack(config, seed=0), tmp_path / "s.rpop")
    with pytest.raises(ModelFormatError):
        load_bundle(tmp_path / "s.rpop")
