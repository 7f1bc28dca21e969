"""Parallel observation prediction (POP) chunkwise forward.

A chunk holds ``B`` complete blocks of ``K + 1`` tokens (``K`` observation
tokens followed by one action token). Besides the ordinary chunkwise outputs,
the POP forward produces, for every block ``j``, the outputs of a bank of
``K`` prediction tokens conditioned on the state that summarizes everything
*before* block ``j``. The banks never write into the recurrent state.

Per layer the work is:

1. ordinary chunkwise retention on the chunk,
2. per-block intermediate states from each block's keys/values (batched),
3. a short sequential scan turning those into the per-block prefix states,
4. one batched retention call over all banks, each with its own state and
   its own rotation phases.

``oracle_blockwise_forward`` computes the same bank outputs the slow way and
shares nothing with steps 2-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .retention import _powers, retention_chunkwise
from .retnet import (
    LayerParams,
    LayerStates,
    StackParams,
    finish_layer,
    layer_norm,
    msr_output,
    positions_from_offset,
    project_heads,
    stack_forward,
    stack_forward_chunkwise,
)


@dataclass
class PopChunkOutput:
    obs_outputs: np.ndarray  # (..., B, K, d_model)
    tail_outputs: np.ndarray  # (..., B, d_model), action-position rows of the main branch
    states: LayerStates
    main_outputs: np.ndarray | None = None  # (..., B * (K + 1), d_model)

    @property
    def n_blocks(self) -> int:
        return self.obs_outputs.shape[-3]

    def block_outputs(self) -> np.ndarray:
        """Per-block concatenation: ``K`` observation rows, then the tail row."""
        return np.concatenate([self.obs_outputs, self.tail_outputs[..., None, :]], axis=-2)


def pop_pseudo_states(block_k, block_v, eta):
    """Intermediate state of each block from its own keys and values only.

    ``block_k``/``block_v`` are ``(..., K + 1, d)``; the block weight of token
    ``m`` is ``eta**(K - m)``. Equals ``K + 1`` recurrent steps from zero.
    """
    block_k, block_v = np.asarray(block_k), np.asarray(block_v)
    if block_k.shape[-2] != block_v.shape[-2]:
        raise ValueError(f"key/value length mismatch: {block_k.shape} vs {block_v.shape}")
    n = block_k.shape[-2]
    if n < 2:
        raise ValueError("a block holds at least one observation token and one action token")
    eta = np.asarray(eta, dtype=block_k.dtype)
    zeta = _powers(eta, (n - 1) - np.arange(n))
    return np.swapaxes(block_k * zeta[..., None], -1, -2) @ block_v


def pop_recombine_states(pseudo, incoming, eta, K: int):
    """Prefix states ``S_j = S~_j + eta**(K+1) S_{j-1}``, seeded with ``S_0 = incoming``.

    ``pseudo`` is indexed by block along axis 0. Returns an array of
    ``B + 1`` states (``S_0 .. S_B``) stacked on axis 0.
    """
    if len(pseudo) == 0:
        raise ValueError("need at least one block")
    eta = np.asarray(eta, dtype=np.asarray(pseudo[0]).dtype)
    carry = (eta ** (K + 1))[..., None, None]
    out = [np.asarray(incoming, dtype=eta.dtype) * np.ones_like(pseudo[0])]
    for s_tilde in pseudo:
        out.append(s_tilde + carry * out[-1])
    return np.stack(out)


def _split_blocks(a, n_blocks: int, axis: int):
    """Split a token axis of length ``n_blocks * L`` into ``(n_blocks, L)``."""
    axis = axis % a.ndim
    return a.reshape(a.shape[:axis] + (n_blocks, a.shape[axis] // n_blocks) + a.shape[axis + 1:])


def pop_layer_forward(layer: LayerParams, z, banks, incoming, token_offset: int, K: int,
                      lookahead: bool = False):
    """One POP layer. Returns ``(z_out, banks_out, outgoing_state)``.

    ``z`` is ``(..., B*(K+1), d)``, ``banks`` is ``(..., B, K, d)`` and
    ``incoming`` is ``(..., h, d_head, d_head)``. Bank ``j`` is conditioned on
    the state before block ``j`` and rotated at block ``j``'s observation
    positions. With ``lookahead`` it is conditioned on the state *after*
    block ``j`` and placed at block ``j + 1``'s observation positions, which is
    what imagination needs.
    """
    msr = layer.msr
    z = np.asarray(z)
    n = z.shape[-2]
    n_blocks = banks.shape[-3]
    if n != n_blocks * (K + 1):
        raise ValueError(f"chunk of {n} tokens does not hold {n_blocks} blocks of {K + 1}")
    if banks.shape[-2] != K:
        raise ValueError(f"prediction banks must hold {K} rows, got {banks.shape[-2]}")
    etas = np.asarray(msr.etas, dtype=z.dtype)
    if incoming is None:
        dh = msr.w_q.shape[-1]
        incoming = np.zeros(z.shape[:-2] + (msr.n_heads, dh, dh), dtype=z.dtype)

    zn =layer_norm(z, layer.ln1_scale, layer.ln1_shift, layer.ln_eps)
    q, k, v = project_heads(msr, zn, positions_from_offset(token_offset, n))
    heads, outgoing = retention_chunkwise(q, k, v, incoming, etas)
    z_out = finish_layer(layer, z, msr_output(msr, zn, heads))

    # per-block prefix states; head axis stays ahead of the block axis here
    pseudo = pop_pseudo_states(_split_blocks(k, n_blocks, -2), _split_blocks(v, n_blocks, -2),
                               etas[:, None])  # (..., h, B, d, d)
    prefix = pop_recombine_states(np.moveaxis(pseudo, -3, 0), incoming, etas, K)  # (B+1, ..., h, d, d)
    shift = 1 if lookahead else 0
    bank_states = np.moveaxis(prefix[shift:shift + n_blocks], 0, -4)  # (..., B, h, d, d)

    starts = token_offset + (np.arange(n_blocks) + shift) * (K + 1)
    hn = layer_norm(banks, layer.ln1_scale, layer.ln1_shift, layer.ln_eps)
    bq, bk, bv = project_heads(msr, hn, positions_from_offset(starts, K))
    bank_heads, _ = retention_chunkwise(bq, bk, bv, bank_states, etas)
    banks_out = finish_layer(layer, banks, msr_output(msr, hn, bank_heads))
    return z_out, banks_out, outgoing


def pop_chunkwise_forward(params: StackParams, chunk, pred_embeddings, incoming: LayerStates | None,
                          token_offset: int = 0, lookahead: bool = False) -> PopChunkOutput:
    """POP forward of one chunk of complete blocks through every layer.

    Every bank starts from the same prediction-token embeddings at layer 0.
    """
    c = params.config
    K = c.tokens_per_obs
    chunk = np.asarray(chunk)
    n = chunk.shape[-2]
    if n == 0 or n % (K + 1):
        raise ValueError(f"chunk length {n} is not a whole number of {K + 1}-token blocks")
    pred_embeddings = np.asarray(pred_embeddings, dtype=chunk.dtype)
    if pred_embeddings.shape != (K, c.d_model):
        raise ValueError(f"prediction embeddings must be ({K}, {c.d_model}), got {pred_embeddings.shape}")
    n_blocks = n // (K + 1)
    batch = chunk.shape[:-2]
    if incoming is None:
        incoming = params.zero_states(batch)
    if len(incoming) != c.n_layers:
        raise ValueError(f"expected {c.n_layers} layer states, got {len(incoming)}")

    z = chunk
    banks = np.broadcast_to(pred_embeddings, batch + (n_blocks, K, c.d_model))
    states = []
    for layer, s in zip(params.layers, incoming):
        if s.shape[-3:] != (c.n_heads, c.d_head, c.d_head):
            raise ValueError(f"state shape {s.shape} does not match the model")
        z, banks, s = pop_layer_forward(layer, z, banks, s, token_offset, K, lookahead)
        states.append(s)
    tails = _split_blocks(z, n_blocks, -2)[..., K, :]
    return PopChunkOutput(banks, tails, states, z)


def oracle_blockwise_forward(params: StackParams, trajectory, pred_embeddings, t: int,
                             initial: LayerStates | None = None, token_offset: int = 0):
    """Bank outputs for block ``t`` (1-based), computed sequentially.

    Runs blocks ``1 .. t-1`` one chunk per block, then a separate forward of
    the prediction tokens at block ``t``'s observation positions. Returns
    ``(K, d_model)`` (with any leading batch dims of ``trajectory``).
    """
    K = params.config.tokens_per_obs
    trajectory = np.asarray(trajectory)
    n_blocks = trajectory.shape[-2] // (K + 1)
    if not 1 <= t <= n_blocks + 1:
        raise ValueError(f"block index {t} outside 1..{n_blocks + 1}")
    states = initial
    if t > 1:
        blocks = [trajectory[..., j * (K + 1):(j + 1) * (K + 1), :] for j in range(t - 1)]
        _, states = stack_forward_chunkwise(params, blocks, states, token_offset)
    pred = np.broadcast_to(np.asarray(pred_embeddings, dtype=trajectory.dtype),
                           trajectory.shape[:-2] + (K, params.config.d_model))
    out, _ = stack_forward(params, pred, states, token_offset + (t - 1) * (K + 1), mode="chunkwise")
    return out
