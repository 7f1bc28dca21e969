"""Fixed-codebook quantization: nearest-embedding tokens, decoding, loss values.

Tokens are 0-based indices into the codebook. The encoder here is a fixed
patch-mean pooler standing in for a learned convolutional encoder; it keeps
the contract image -> ``K`` latent vectors -> ``K`` tokens.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

CODEBOOK_MAGIC = b"RPCB"


class Codebook:
    """``N`` distinct embedding rows of width ``d``."""

    def __init__(self, vectors):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise ValueError(f"codebook needs at least two rows of shape (N, d), got {vectors.shape}")
        if np.unique(vectors, axis=0).shape[0] != vectors.shape[0]:
            raise ValueError("codebook rows must be pairwise distinct")
        vectors.setflags(write=False)
        self.vectors = vectors

    @classmethod
    def random(cls, n: int, d: int, seed: int = 0) -> "Codebook":
        return cls(np.random.default_rng(seed).normal(size=(n, d)))

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.size

    def save(self, path) -> None:
        """Raw dump: magic, u32 N, u32 d, then little-endian float64 rows."""
        with open(path, "wb") as f:
            f.write(CODEBOOK_MAGIC + struct.pack("<II", self.size, self.dim))
            f.write(self.vectors.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        raw = Path(path).read_bytes()
        if raw[:4] != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: not a codebook dump")
        n, d = struct.unpack_from("<II", raw, 4)
        body = raw[12:]
        if len(body) != n * d * 8:
            raise ValueError(f"{path}: expected {n * d * 8} payload bytes, found {len(body)}")
        return cls(np.frombuffer(body, dtype="<f8").reshape(n, d))


def _vectors(codebook) -> np.ndarray:
    return codebook.vectors if isinstance(codebook, Codebook) else np.asarray(codebook, dtype=np.float64)


def quantize(latents, codebook, block_rows: int = 2048) -> np.ndarray:
    """Index of the nearest codebook row for each latent vector (ties -> lowest index).

    ``latents`` is ``(..., d)``; distances are computed as explicit
    differences so equidistant rows compare exactly equal.
    """
    E = _vectors(codebook)
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[-1] != E.shape[1]:
        raise ValueError(f"latent width {latents.shape[-1]} != codebook width {E.shape[1]}")
    flat = latents.reshape(-1, E.shape[1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    step = max(1, block_rows * 64 // max(E.shape[0], 1))
    for start in range(0, flat.shape[0], step):
        part = flat[start:start + step]
        dist = ((part[:, None, :] - E[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + step] = np.argmin(dist, axis=1)
    return out.reshape(latents.shape[:-1])


def decode_tokens(tokens, codebook) -> np.ndarray:
    """Codebook rows for ``tokens`` in the same (spatial) order."""
    E = _vectors(codebook)
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= E.shape[0]):
        raise IndexError(f"token ids must lie in [0, {E.shape[0]}), got range [{tokens.min()}, {tokens.max()}]")
    return E[tokens]


def _grid_side(K: int) -> int:
    side = math.isqrt(K)
    if side * side != K:
        raise ValueError(f"token count {K} is not a perfect square")
    return side


def encode_observation(image, codebook, K: int = 64):
    """Patch-mean pool an ``(h, w, 3)`` image onto a sqrt(K) x sqrt(K) grid and quantize.

    Each patch's mean colour is tiled across the codebook width (channels
    repeat cyclically, then truncate). Returns ``(tokens (K,), latents (K, d))``.
    """
    E = _vectors(codebook)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected an (h, w, channels) image, got {image.shape}")
    side = _grid_side(K)
    h, w, ch = image.shape
    if h % side or w % side:
        raise ValueError(f"image {h}x{w} does not divide into a {side}x{side} grid")
    patches = image.reshape(side, h // side, side, w // side, ch).mean(axis=(1, 3)).reshape(K, ch)
    latents = patches[:, np.arange(E.shape[1]) % ch]
    return quantize(latents, E), latents


def tokens_to_image(tokens, codebook, image_shape) -> np.ndarray:
    """Paint each grid cell with its code vector's first channels (a crude decoder)."""
    E = _vectors(codebook)
    h, w, ch = image_shape
    side = _grid_side(len(tokens))
    cells = decode_tokens(tokens, E)[:, np.arange(ch) % E.shape[1]].reshape(side, side, ch)
    return np.repeat(np.repeat(cells, h // side, axis=0), w // side, axis=1)


def tokenizer_loss_value(x, x_hat, encoder_latents, quantized_latents):
    """Reconstruction and the two commitment terms, evaluated (no gradients).

    Returns ``(mean |x - x_hat|, mean (E(x) - E(z))**2, mean (E(z) - E(x))**2)``.
    The stop-gradient placement only matters for training, so both commitment
    values coincide here.
    """
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    enc, quant = np.asarray(encoder_latents, dtype=np.float64), np.asarray(quantized_latents, dtype=np.float64)
    if x.shape != x_hat.shape or enc.shape != quant.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs x_hat {x_hat.shape}, latents {enc.shape} vs {quant.shape}")
    l1 = float(np.abs(x - x_hat).mean())
    commit_a = float(((enc - quant) ** 2).mean())
    commit_b = float(((quant - enc) ** 2).mean())
    return l1, commit_a, commit_b
