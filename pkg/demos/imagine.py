"""Imagining a few steps ahead with a random world model.

Untrained weights make the dreams meaningless. What matters here is that
the three generation modes make very different numbers of sequential model
calls and still produce the same tokens.
"""

import time

import numpy as np

from retpop.retnet import ModelConfig
from retpop.world_model import TokenHistogramPolicy, TokenTrajectory, imagine_rollout, init_bundle

config = ModelConfig(n_layers=2, n_heads=2, d_model=64, d_ffn=128, tokens_per_obs=16, vocab_size=64, n_actions=4)
bundle = init_bundle(config, seed=7, std=0.2)
rng = np.random.default_rng(7)
context = TokenTrajectory(rng.integers(0, 64, (3, 16)), rng.integers(0, 4, 3))
policy = TokenHistogramPolicy(config.vocab_size, config.n_actions, seed=7)

traces = {}
for mode in ("default", "combined", "oracle"):
    start = time.perf_counter()
    traces[mode] = imagine_rollout(bundle, context, policy, horizon=6, mode=mode, temperature=0.7, seed=3)
    ms = (time.perf_counter() - start) * 1e3
    print(f"{mode:>8}: {traces[mode].sequential_call_count:3d} calls, {ms:6.1f} ms")

same = all(np.array_equal(traces[m].obs, traces["default"].obs) for m in traces)
print("identical observations:", same)
print("imagined actions:", traces["default"].actions[0])
print("first imagined frame:", traces["default"].obs[0, 1])
