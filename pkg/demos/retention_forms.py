"""Three ways to compute retention, and why they agree.

The recurrent form walks one token at a time with a (d, d) state. The
parallel form builds a decay-masked score matrix. The chunkwise form mixes
the two: parallel inside a chunk, a state carried between chunks.
"""

import numpy as np

from retpop.retention import (
    decay_matrix,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
)

rng = np.random.default_rng(0)
n, d, eta = 12, 8, 0.9
Q, K, V = (rng.normal(size=(n, d)) for _ in range(3))

print("decay mask, top-left corner:")
print(np.round(decay_matrix(4, eta), 3))

y_rec, s_rec = retention_recurrent(Q, K, V, None, eta)
y_par = retention_parallel(Q, K, V, eta)

# split 5 + 7 and thread the state across the boundary
y1, s1 = retention_chunkwise(Q[:5], K[:5], V[:5], None, eta)
y2, s2 = retention_chunkwise(Q[5:], K[5:], V[5:], s1, eta)
y_chk = np.concatenate([y1, y2])

print(f"parallel  vs recurrent: {np.abs(y_par - y_rec).max():.2e}")
print(f"chunkwise vs recurrent: {np.abs(y_chk - y_rec).max():.2e}")
print(f"final state difference: {np.abs(s2 - s_rec).max():.2e}")
