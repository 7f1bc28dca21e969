"""Multi-scale retention layers and the layer stack.

Parameters are stored head-stacked (``w_q`` has shape ``(h, d_model, d_head)``)
so every head runs in one batched contraction. Recurrent states for one layer
are arrays of shape ``(..., h, d_head, d_head)``; ``LayerStates`` is a list of
``L`` such arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import erf, expit

from .retention import (
    chunk_outgoing_state,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
    rotation_angles,
    rotation_phases,
    rotate_pairs,
)

MODES = ("parallel", "chunkwise", "recurrent")
LayerStates = list  # list[np.ndarray], one (..., h, d_head, d_head) array per layer


def decay_schedule(n_heads: int) -> np.ndarray:
    """Per-head decays ``1 - 2**(-5 - i)``."""
    return 1.0 - 2.0 ** (-5.0 - np.arange(n_heads))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults give the full-size reference world model."""

    n_layers: int = 5
    n_heads: int = 4
    d_model: int = 256
    d_ffn: int = 1024
    tokens_per_obs: int = 64
    vocab_size: int = 512
    n_actions: int = 18
    blocks_per_chunk: int = 3
    d_embed: int | None = None
    ln_eps: float = 1e-6
    # kept for parity with the training configuration; inference never drops
    dropout: float = 0.1
    reward_mode: str = "categorical"

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("need at least one layer and one head")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for pairwise rotation")
        if self.blocks_per_chunk < 1:
            raise ValueError("blocks_per_chunk must be >= 1")
        if self.reward_mode not in ("categorical", "mse"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.d_embed == self.d_model:
            object.__setattr__(self, "d_embed", None)  # one spelling for "no adapter"

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def embed_dim(self) -> int:
        return self.d_model if self.d_embed is None else self.d_embed

    @property
    def block_len(self) -> int:
        return self.tokens_per_obs + 1

    @property
    def etas(self) -> np.ndarray:
        return decay_schedule(self.n_heads)

    def with_(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class HeadProjections:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    eta: float

    def __post_init__(self):
        if not (self.w_q.shape == self.w_k.shape and self.w_q.shape[0] == self.w_v.shape[0]):
            raise ValueError("inconsistent head projection shapes")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.eta}")


@dataclass
class MsrParams:
    w_q: np.ndarray  # (h, d_model, d_head)
    w_k: np.ndarray
    w_v: np.ndarray
    w_g: np.ndarray  # (d_model, d_model)
    w_o: np.ndarray
    gn_scale: np.ndarray  # (d_model,)
    gn_shift: np.ndarray
    etas: np.ndarray  # (h,)
    theta: np.ndarray  # (d_head // 2,)
    gn_eps: float = 1e-6

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    def head(self, i: int) -> HeadProjections:
        return HeadProjections(self.w_q[i], self.w_k[i], self.w_v[i], float(self.etas[i]))

    @cached_property
    def w_qkv(self) -> np.ndarray:
        """All projections fused into one ``(d_model, 3 * h * d_head)`` matrix."""
        d = self.w_q.shape[1]
        return np.concatenate([w.transpose(1, 0, 2).reshape(d, -1) for w in (self.w_q, self.w_k, self.w_v)], axis=1)


@dataclass
class LayerParams:
    msr: MsrParams
    ffn_w1: np.ndarray  # (d_model, d_ffn)
    ffn_w2: np.ndarray  # (d_ffn, d_model)
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    ln_eps: float = 1e-6


@dataclass
class StackParams:
    config: ModelConfig
    layers: list[LayerParams] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != self.config.n_layers:
            raise ValueError(f"expected {self.config.n_layers} layers, got {len(self.layers)}")
        expected = decay_schedule(self.config.n_heads)
        for layer in self.layers:
            if not np.allclose(layer.msr.etas, expected, rtol=0, atol=0):
                raise ValueError("per-head decays must follow 1 - 2**(-5 - i)")

    @property
    def dtype(self):
        return self.layers[0].ffn_w1.dtype

    def zero_states(self, batch_shape: tuple = ()) -> LayerStates:
        c = self.config
        shape = tuple(batch_shape) + (c.n_heads, c.d_head, c.d_head)
        return [np.zeros(shape, dtype=self.dtype) for _ in range(c.n_layers)]

    def astype(self, dtype) -> "StackParams":
        return StackParams(self.config, [_layer_astype(l, dtype) for l in self.layers])


# these fields are schedules, not weights: they stay float64 across precision casts
_FIXED = {"etas", "theta"}


def _layer_astype(layer: LayerParams, dtype) -> LayerParams:
    msr = MsrParams(
        **{
            k: (v if k in _FIXED or not isinstance(v, np.ndarray) else v.astype(dtype))
            for k, v in vars(layer.msr).items()
            if k != "w_qkv"
        }
    )
    rest = {k: (v.astype(dtype) if isinstance(v, np.ndarray) else v) for k, v in vars(layer).items() if k != "msr"}
    return LayerParams(msr=msr, **rest)


def init_stack(config: ModelConfig, seed: int = 0, std: float = 0.02, dtype=np.float64) -> StackParams:
    """Seeded Gaussian weights; norms start at identity affine."""
    rng = np.random.default_rng(seed)
    c = config
    layers = []
    for _ in range(c.n_layers):
        msr = MsrParams(
            w_q=rng.normal(0.0, std, (c.n_heads, c.d_model, c.d_head)),
            w_k=rng.normal(0.0, std, (c.n_heads, c.d_model, c.d_head)),
            w_v=rng.normal(0.0, std, (c.n_heads, c.d_model, c.d_head)),
            w_g=rng.normal(0.0, std, (c.d_model, c.d_model)),
            w_o=rng.normal(0.0, std, (c.d_model, c.d_model)),
            gn_scale=np.ones(c.d_model),
            gn_shift=np.zeros(c.d_model),
            etas=decay_schedule(c.n_heads),
            theta=rotation_angles(c.d_head),
            gn_eps=c.ln_eps,
        )
        layers.append(
            LayerParams(
                msr=msr,
                ffn_w1=rng.normal(0.0, std, (c.d_model, c.d_ffn)),
                ffn_w2=rng.normal(0.0, std, (c.d_ffn, c.d_model)),
                ln1_scale=np.ones(c.d_model),
                ln1_shift=np.zeros(c.d_model),
                ln2_scale=np.ones(c.d_model),
                ln2_shift=np.zeros(c.d_model),
                ln_eps=c.ln_eps,
            )
        )
    params = StackParams(c, layers)
    return params if dtype == np.float64 else params.astype(dtype)


# ---------------------------------------------------------------------------
# elementwise pieces


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def swish(x):
    return x * expit(x)


def layer_norm(x, scale, shift, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def group_norm(y, n_groups, scale, shift, eps):
    """Normalize each token's channels within ``n_groups`` contiguous groups."""
    shape = y.shape
    g = y.reshape(shape[:-1] + (n_groups, shape[-1] // n_groups))
    mu = g.mean(axis=-1, keepdims=True)
    var = g.var(axis=-1, keepdims=True)
    g = (g - mu) / np.sqrt(var + eps)
    return g.reshape(shape) * scale + shift


def ffn(layer: LayerParams, x):
    return gelu(x @ layer.ffn_w1) @ layer.ffn_w2


# ---------------------------------------------------------------------------
# retention plumbing


def positions_from_offset(token_offset, n: int) -> np.ndarray:
    offset = np.asarray(token_offset)
    if np.any(offset < 0):
        raise ValueError(f"token offset must be non-negative, got {token_offset}")
    return offset[..., None] + np.arange(n)


def project_heads(msr: MsrParams, xn, positions):
    """Project normalized input to rotated per-head ``q, k`` and ``v``.

    ``xn`` is ``(..., n, d_model)``; ``positions`` broadcasts against ``(..., n)``.
    Returns arrays of shape ``(..., h, n, d_head)``.
    """
    h, _, dh = msr.w_q.shape
    qkv = (xn @ msr.w_qkv).reshape(xn.shape[:-1] + (3, h, dh))
    q, k, v = np.moveaxis(qkv, (-3, -2), (0, -3))
    cos, sin = rotation_phases(positions, msr.theta)
    cos = cos.astype(xn.dtype, copy=False)[..., None, :, :]
    sin = sin.astype(xn.dtype, copy=False)[..., None, :, :]
    return rotate_pairs(q, cos, sin), rotate_pairs(k, cos, sin), v


def run_retention(q, k, v, states, etas, mode: str, chunk_size: int | None = None):
    """Dispatch to one of the three retention forms. Returns ``(heads, new_states)``.

    ``parallel`` treats the whole input as one chunk; ``chunkwise`` splits it
    into ``chunk_size`` pieces; ``recurrent`` walks token by token.
    """
    etas = np.asarray(etas, dtype=q.dtype)
    if mode == "parallel":
        out = retention_parallel(q, k, v, etas)
        if states is not None:
            n = q.shape[-2]
            xi = etas[..., None] ** np.arange(1, n + 1)
            out = out + (q @ states) * xi[..., None]
        return out, chunk_outgoing_state(k, v, states, etas)
    if mode == "chunkwise":
        n = q.shape[-2]
        size = n if chunk_size is None else chunk_size
        if size < 1:
            raise ValueError("chunk_size must be >= 1")
        outs = []
        for start in range(0, n, size):
            sl = slice(start, start + size)
            y, states = retention_chunkwise(q[..., sl, :], k[..., sl, :], v[..., sl, :], states, etas)
            outs.append(y)
        return np.concatenate(outs, axis=-2), states
    if mode == "recurrent":
        return retention_recurrent(q, k, v, states, etas)
    raise ValueError(f"unknown retention mode {mode!r}; expected one of {MODES}")


def merge_heads(heads):
    """``(..., h, n, d_head) -> (..., n, h * d_head)``."""
    moved = np.moveaxis(heads, -3, -2)
    return moved.reshape(moved.shape[:-2] + (-1,))


def msr_output(msr: MsrParams, xn, heads):
    """Group-normalize the concatenated heads, gate with ``swish(xn W_G)``, project."""
    y = group_norm(merge_heads(heads), msr.n_heads, msr.gn_scale, msr.gn_shift, msr.gn_eps)
    return (swish(xn @ msr.w_g) * y) @ msr.w_o


def msr_forward(msr: MsrParams, x, states, token_offset=0, mode: str = "chunkwise", chunk_size=None):
    """Multi-scale retention on (already normalized) ``x``. Returns ``(out, new_states)``."""
    x = np.asarray(x)
    if x.shape[-1] != msr.w_g.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != d_model {msr.w_g.shape[0]}")
    positions = positions_from_offset(token_offset, x.shape[-2])
    q, k, v = project_heads(msr, x, positions)
    heads, new_states = run_retention(q, k, v, states, msr.etas, mode, chunk_size)
    return msr_output(msr, x, heads), new_states


def finish_layer(layer: LayerParams, x, msr_out):
    """Residual add around MSR, then the pre-normalized FFN sublayer."""
    y = msr_out + x
    return ffn(layer, layer_norm(y, layer.ln2_scale, layer.ln2_shift, layer.ln_eps)) + y


def layer_forward(layer: LayerParams, x, states, token_offset=0, mode: str = "chunkwise", chunk_size=None):
    """``Y = MSR(LN(X)) + X``; ``X' = FFN(LN(Y)) + Y``."""
    xn = layer_norm(x, layer.ln1_scale, layer.ln1_shift, layer.ln_eps)
    out, new_states = msr_forward(layer.msr, xn, states, token_offset, mode, chunk_size)
    return finish_layer(layer, x, out), new_states


def stack_forward(params: StackParams, x, states: LayerStates | None = None, token_offset=0,
                  mode: str = "chunkwise", chunk_size=None):
    """Run all layers over ``x`` as one call. Returns ``(out, new LayerStates)``."""
    if states is None:
        states = params.zero_states(np.shape(x)[:-2])
    new_states = []
    for layer, s in zip(params.layers, states):
        x, s = layer_forward(layer, x, s, token_offset, mode, chunk_size)
        new_states.append(s)
    return x, new_states


def stack_forward_chunkwise(params: StackParams, chunks: Sequence[np.ndarray],
                            initial: LayerStates | None = None, token_offset: int = 0):
    """Thread the per-layer states through an ordered list of chunks.

    Each chunk runs through the whole stack before the next starts; token
    positions continue across chunks from ``token_offset``.
    Returns ``(outputs per chunk, final LayerStates)``.
    """
    if len(chunks) == 0:
        raise ValueError("need at least one chunk")
    states = initial
    outputs = []
    offset = token_offset
    for chunk in chunks:
        out, states = stack_forward(params, chunk, states, offset, mode="chunkwise")
        outputs.append(out)
        offset += np.shape(chunk)[-2]
    return outputs, states
