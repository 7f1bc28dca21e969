"""Predicting a whole observation in one pass.

A chunk of blocks goes through the stack once. Alongside it, a bank of K
prediction tokens per block reads the state before that block. We check
those bank outputs against the slow path that replays the prefix block by
block, and confirm the banks leave the recurrent state untouched.
"""

import numpy as np

from retpop.pop import oracle_blockwise_forward, pop_chunkwise_forward
from retpop.retnet import ModelConfig, init_stack, stack_forward

config = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ffn=64, tokens_per_obs=8)
params = init_stack(config, seed=1, std=0.1)
rng = np.random.default_rng(1)

K, n_blocks = config.tokens_per_obs, 4
chunk = rng.normal(size=(n_blocks * (K + 1), config.d_model))
pred = rng.normal(size=(K, config.d_model))

res = pop_chunkwise_forward(params, chunk, pred, None)
print("bank outputs:", res.obs_outputs.shape)

for t in range(1, n_blocks + 1):
    slow = oracle_blockwise_forward(params, chunk, pred, t)
    print(f"block {t}: max difference {np.abs(res.obs_outputs[t - 1] - slow).max():.2e}")

_, plain = stack_forward(params, chunk)
gap = max(np.abs(a - b).max() for a, b in zip(res.states, plain))
print(f"state with banks vs without: {gap:.2e}")
