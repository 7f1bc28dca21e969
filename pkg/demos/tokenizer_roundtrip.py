"""Images to tokens and back.

Patches are pooled onto a square grid and snapped to the nearest codebook
row. Painting the grid with the chosen rows and encoding again gives the
same tokens.
"""

import numpy as np

from retpop.tokenizer import Codebook, encode_observation, tokenizer_loss_value, tokens_to_image

codebook = Codebook.random(512, 3, seed=0)
image = np.random.default_rng(0).random((64, 64, 3))

tokens, latents = encode_observation(image, codebook, K=64)
print("tokens:", tokens.reshape(8, 8))

painted = tokens_to_image(tokens, codebook, image.shape)
again, _ = encode_observation(painted, codebook, K=64)
print("re-encoding the painted image is stable:", np.array_equal(again, tokens))

l1, commit, _ = tokenizer_loss_value(image, painted, latents, codebook.vectors[tokens])
print(f"reconstruction L1 {l1:.4f}, commitment {commit:.4f}")
