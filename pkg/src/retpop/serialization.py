"""Flat binary model files (``RPOPv1``).

Layout, all little-endian::

    b"RPOPv1"
    u32 x 7: n_layers, n_heads, d_model, d_ffn, K, N, n_actions
    f64: layer-norm epsilon
    per layer, float64 arrays in this order:
        w_q (h, d_model, d_head), w_k, w_v, w_g, w_o, gn_scale, gn_shift,
        ffn_w1, ffn_w2, ln1_scale, ln1_shift, ln2_scale, ln2_shift
    bundle section, present when K > 0:
        u32 d_embed, u32 reward_mode (0 categorical, 1 mse), u32 has_adapter,
        u32 blocks_per_chunk
        codebook (N, d_embed), [adapter (d_embed, d_model)], action_table,
        pred_tokens, obs_head, reward_head, done_head

Decays and rotation frequencies are derived from the header, not stored.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .retention import rotation_angles
from .retnet import LayerParams, ModelConfig, MsrParams, StackParams, decay_schedule
from .world_model import WorldModelBundle

MAGIC = b"RPOPv1"
_HEADER = struct.Struct("<7Id")
_BUNDLE = struct.Struct("<4I")
_REWARD_MODES = ("categorical", "mse")
_MSR_FIELDS = ("w_q", "w_k", "w_v", "w_g", "w_o", "gn_scale", "gn_shift")
_LAYER_FIELDS = ("ffn_w1", "ffn_w2", "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift")


class ModelFormatError(ValueError):
    pass


def _layer_shapes(c: ModelConfig) -> dict[str, tuple]:
    d, h, dh, f = c.d_model, c.n_heads, c.d_head, c.d_ffn
    return {
        "w_q": (h, d, dh), "w_k": (h, d, dh), "w_v": (h, d, dh), "w_g": (d, d), "w_o": (d, d),
        "gn_scale": (d,), "gn_shift": (d,), "ffn_w1": (d, f), "ffn_w2": (f, d),
        "ln1_scale": (d,), "ln1_shift": (d,), "ln2_scale": (d,), "ln2_shift": (d,),
    }


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _stack_bytes(stack: StackParams, K: int, N: int, A: int) -> bytes:
    c = stack.config
    parts = [MAGIC, _HEADER.pack(c.n_layers, c.n_heads, c.d_model, c.d_ffn, K, N, A, c.ln_eps)]
    for layer in stack.layers:
        parts += [_f64(getattr(layer.msr, name)) for name in _MSR_FIELDS]
        parts += [_f64(getattr(layer, name)) for name in _LAYER_FIELDS]
    return b"".join(parts)


def save_stack(stack: StackParams, path) -> None:
    Path(path).write_bytes(_stack_bytes(stack, 0, 0, 0))


def save_bundle(bundle: WorldModelBundle, path) -> None:
    c = bundle.config
    parts = [_stack_bytes(bundle.stack, c.tokens_per_obs, c.vocab_size, c.n_actions)]
    has_adapter = bundle.embed_adapter is not None
    parts.append(_BUNDLE.pack(c.embed_dim, _REWARD_MODES.index(c.reward_mode), int(has_adapter), c.blocks_per_chunk))
    parts.append(_f64(bundle.codebook))
    if has_adapter:
        parts.append(_f64(bundle.embed_adapter))
    for a in (bundle.action_table, bundle.pred_tokens, bundle.obs_head, bundle.reward_head, bundle.done_head):
        parts.append(_f64(a))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ModelFormatError(f"{self.path}: truncated file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def _read(path):
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not an RPOPv1 model")
    r = _Reader(raw, path)
    r.take(len(MAGIC))
    L, h, d, f, K, N, A, eps = _HEADER.unpack(r.take(_HEADER.size))
    return r, (L, h, d, f, K, N, A, eps)


def _read_layers(r: _Reader, c: ModelConfig) -> list[LayerParams]:
    shapes = _layer_shapes(c)
    layers = []
    for _ in range(c.n_layers):
        msr = {name: r.array(shapes[name]) for name in _MSR_FIELDS}
        rest = {name: r.array(shapes[name]) for name in _LAYER_FIELDS}
        layers.append(LayerParams(
            msr=MsrParams(**msr, etas=decay_schedule(c.n_heads), theta=rotation_angles(c.d_head), gn_eps=c.ln_eps),
            ln_eps=c.ln_eps, **rest,
        ))
    return layers


def load_stack(path) -> StackParams:
    r, (L, h, d, f, K, N, A, eps) = _read(path)
    c = ModelConfig(n_layers=L, n_heads=h, d_model=d, d_ffn=f, tokens_per_obs=max(K, 1),
                    vocab_size=max(N, 2), n_actions=max(A, 1), ln_eps=eps)
    return StackParams(c, _read_layers(r, c))


def load_bundle(path) -> WorldModelBundle:
    r, (L, h, d, f, K, N, A, eps) = _read(path)
    if K == 0:
        raise ModelFormatError(f"{path}: file holds a bare layer stack, not a world-model bundle")
    # the bundle section sits after the layers; read layers with a provisional config first
    provisional = ModelConfig(n_layers=L, n_heads=h, d_model=d, d_ffn=f, ln_eps=eps)
    layers = _read_layers(r, provisional)
    d_embed, reward_code, has_adapter, bpc = _BUNDLE.unpack(r.take(_BUNDLE.size))
    if reward_code >= len(_REWARD_MODES):
        raise ModelFormatError(f"{path}: unknown reward mode code {reward_code}")
    c = ModelConfig(n_layers=L, n_heads=h, d_model=d, d_ffn=f, tokens_per_obs=K, vocab_size=N, n_actions=A,
                    blocks_per_chunk=bpc, d_embed=None if d_embed == d else d_embed, ln_eps=eps,
                    reward_mode=_REWARD_MODES[reward_code])
    codebook = r.array((N, d_embed))
    adapter = r.array((d_embed, d)) if has_adapter else None
    r_dim = 3 if c.reward_mode == "categorical" else 1
    bundle = WorldModelBundle(
        stack=StackParams(c, layers),
        codebook=codebook,
        action_table=r.array((A, d)),
        pred_tokens=r.array((K, d)),
        obs_head=r.array((d, N)),
        reward_head=r.array((d, r_dim)),
        done_head=r.array((d, 2)),
        embed_adapter=adapter,
    )
    if r.pos != len(r.raw):
        raise ModelFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return bundle
