"""Single-head Retention in its three equivalent forms.

All kernels accept arbitrary leading batch dimensions: sequences are
``(..., n, d)``, states are ``(..., d_k, d_v)``. The decay ``eta`` may be a
scalar or an array broadcasting against the leading dimensions (e.g. one
value per head when the head axis is the last leading axis).

Indexing convention (0-based, local to a chunk of length ``n``)::

    S_r   = eta * S_{r-1} + k_r^T v_r          # the normative recurrence
    y_r   = q_r S_r
    xi_r  = eta ** (r + 1)                    # weight of the incoming state in row r
    zeta_m = eta ** (n - 1 - m)               # weight of key m in the outgoing state

With these exponents the chunkwise form reproduces the recurrence exactly.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

ROTATION_BASE = 10000.0


def decay_matrix(n: int, eta: float) -> np.ndarray:
    """Causal decay mask ``D[r, c] = eta**(r - c)`` for ``r >= c``, else 0."""
    if n < 1:
        raise ValueError(f"sequence length must be positive, got {n}")
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {eta}")
    return _decay(n, np.float64(eta))


def _decay(n: int, eta: np.ndarray) -> np.ndarray:
    # eta of any shape -> (*eta.shape, n, n); eta == 0 allowed (0**0 == 1)
    eta = np.asarray(eta)
    key = (n, eta.shape, eta.dtype.str, eta.tobytes())
    return _decay_cached(key)


@lru_cache(maxsize=256)
def _decay_cached(key) -> np.ndarray:
    n, shape, dtype, raw = key
    eta = np.frombuffer(raw, dtype=dtype).reshape(shape)
    dist = np.subtract.outer(np.arange(n), np.arange(n))
    lower = dist >= 0
    powers = np.power(eta[..., None, None], np.where(lower, dist, 0))
    out = np.where(lower, powers, 0.0).astype(eta.dtype)
    out.setflags(write=False)
    return out


def _powers(eta: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """``eta**exponents`` broadcast to ``(*eta.shape, len(exponents))``."""
    eta = np.asarray(eta)
    if not np.issubdtype(eta.dtype, np.floating):
        eta = eta.astype(np.float64)
    # integer exponent arrays would promote float32 bases to float64
    return np.power(eta[..., None], np.asarray(exponents, dtype=eta.dtype))


def rotation_angles(d_head: int, base: float = ROTATION_BASE) -> np.ndarray:
    """Per-pair angular frequencies ``theta_j = base**(-j / (d_head/2 - 1))``."""
    if d_head < 2 or d_head % 2:
        raise ValueError(f"head dimension must be even and positive, got {d_head}")
    return 1.0 / base ** np.linspace(0.0, 1.0, d_head // 2)


def rotation_phases(positions, theta: np.ndarray):
    """cos/sin tables of shape ``(*positions.shape, d/2)``."""
    phase = np.asarray(positions, dtype=np.float64)[..., None] * theta
    return np.cos(phase), np.sin(phase)


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive coordinate pairs ``(x[2j], x[2j+1])`` counter-clockwise."""
    a = x[..., 0::2]
    b = x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)), dtype=x.dtype)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def apply_position_rotation(x, start_index, theta, conjugate: bool = False) -> np.ndarray:
    """Rotate the element at offset ``p`` of ``x`` by ``(start_index + p) * theta``.

    ``x`` has shape ``(..., n, d_head)``. ``start_index`` is an int or an integer
    array broadcasting against the leading dimensions of ``x`` (one start per
    sequence, which is how prediction banks at different blocks are rotated in
    a single call).

    ``conjugate`` selects the key-side branch. Keys are held in conjugate
    coordinates, so multiplying by the conjugate phase is the real rotation
    ``C R(-phi) C = R(phi)`` with ``C`` the pair reflection. The result is
    numerically the same rotation as the query branch, which is what makes
    ``dot(rotate(q, n), rotate(k, m, conjugate=True))`` depend on ``n - m``
    only.
    """
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise ValueError(f"head dimension must be even, got {x.shape[-1]}")
    start = np.asarray(start_index)
    if np.any(start < 0):
        raise ValueError("start_index must be non-negative")
    n = x.shape[-2]
    positions = start[..., None] + np.arange(n)
    cos, sin = rotation_phases(positions, np.asarray(theta))
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    if conjugate:
        reflected = x.copy()
        reflected[..., 1::2] *= -1
        out = rotate_pairs(reflected, cos, -sin)
        out[..., 1::2] *= -1
        return out
    return rotate_pairs(x, cos, sin)


def retention_recurrent_step(state, q, k, v, eta):
    """One token of the recurrence. Returns ``(y, new_state)``.

    ``new_state = eta * state + outer(k, v)`` and ``y = q @ new_state``.
    """
    state = np.asarray(state)
    if state.shape[-2] != q.shape[-1] or q.shape[-1] != k.shape[-1] or state.shape[-1] != v.shape[-1]:
        raise ValueError(
            f"dimension mismatch: state {state.shape}, q {q.shape}, k {k.shape}, v {v.shape}"
        )
    eta = np.asarray(eta, dtype=state.dtype)
    new_state = eta[..., None, None] * state + k[..., :, None] * v[..., None, :]
    y = np.einsum("...k,...kv->...v", q, new_state)
    return y, new_state


def retention_parallel(Q, K, V, eta) -> np.ndarray:
    """``(Q K^T * D) V`` over the whole sequence with a zero incoming state."""
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    if not (Q.shape[-2] == K.shape[-2] == V.shape[-2]) or Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"dimension mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    n = Q.shape[-2]
    D = _decay(n, np.asarray(eta, dtype=Q.dtype))
    scores = (Q @ np.swapaxes(K, -1, -2)) * D
    return scores @ V


def retention_chunkwise(Q, K, V, incoming, eta):
    """One chunk of the chunkwise form. Returns ``(Y, outgoing_state)``.

    ``Y = (Q K^T * D) V + (Q S_in) * xi`` and
    ``S_out = (K * zeta)^T V + eta**n S_in``. ``Q`` and ``K`` must already be
    rotated for the chunk's absolute positions.
    """
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    n = Q.shape[-2]
    if n < 1:
        raise ValueError("chunk length must be at least 1")
    if incoming is None:
        incoming = np.zeros(Q.shape[:-2] + (Q.shape[-1], V.shape[-1]), dtype=Q.dtype)
    incoming = np.asarray(incoming)
    if incoming.shape[-2:] != (Q.shape[-1], V.shape[-1]):
        raise ValueError(f"state shape {incoming.shape} does not match Q {Q.shape} / V {V.shape}")
    eta = np.asarray(eta, dtype=Q.dtype)
    xi = _powers(eta, np.arange(1, n + 1))  # (..., n)
    inner = retention_parallel(Q, K, V, eta)
    cross = (Q @ incoming) * xi[..., None]
    return inner + cross, chunk_outgoing_state(K, V, incoming, eta)


def chunk_outgoing_state(K, V, incoming, eta):
    """``(K * zeta)^T V + eta**n S_in`` with ``zeta_m = eta**(n - 1 - m)``."""
    eta = np.asarray(eta, dtype=K.dtype)
    n = K.shape[-2]
    zeta = _powers(eta, n - 1 - np.arange(n))
    local = np.swapaxes(K * zeta[..., None], -1, -2) @ V
    if incoming is None:
        return local
    return local + (eta ** n)[..., None, None] * incoming


def retention_recurrent(Q, K, V, incoming, eta):
    """Token-by-token reference over a whole sequence. Returns ``(Y, state)``."""
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    state = incoming
    if state is None:
        state = np.zeros(Q.shape[:-2] + (Q.shape[-1], V.shape[-1]), dtype=Q.dtype)
    out = np.empty(np.broadcast_shapes(Q.shape[:-1], V.shape[:-1]) + (V.shape[-1],), dtype=Q.dtype)
    for r in range(Q.shape[-2]):
        out[..., r, :], state = retention_recurrent_step(state, Q[..., r, :], K[..., r, :], V[..., r, :], eta)
    return out, state
