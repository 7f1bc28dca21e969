import dataclasses

import numpy as np
import pytest

from retpop.retnet import (
    ModelConfig,
    StackParams,
    decay_schedule,
    ffn,
    group_norm,
    init_stack,
    layer_forward,
    msr_forward,
    stack_forward,
    stack_forward_chunkwise,
)

from conftest import small_config
from oracles import naive_layer, naive_stack, rel_err


@pytest.fixture
def params():
    return init_stack(small_config(n_heads=4, d_model=32, d_ffn=64), seed=3, std=0.2)


def test_reference_defaults():
    c = ModelConfig()
    assert (c.n_layers, c.n_heads, c.d_model, c.d_ffn) == (5, 4, 256, 1024)
    assert c.blocks_per_chunk == 3 and c.ln_eps == 1e-6


def test_decay_schedule_values():
    np.testing.assert_array_equal(decay_schedule(4), [1 - 1 / 32, 1 - 1 / 64, 1 - 1 / 128, 1 - 1 / 256])


def test_schedule_asserted_on_construction(params):
    layer = params.layers[0]
    bad = dataclasses.replace(layer, msr=dataclasses.replace(layer.msr, etas=np.full(4, 0.9)))
    with pytest.raises(ValueError, match="decays"):
        StackParams(params.config, [bad, params.layers[1]])


@pytest.mark.parametrize("kw", [dict(d_model=30, n_heads=4), dict(d_model=12, n_heads=4), dict(n_layers=0)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_gate_closed_gives_zero(params, rng):
    msr = dataclasses.replace(params.layers[0].msr, w_g=np.zeros((32, 32)))
    out, _ = msr_forward(msr, rng.normal(size=(7, 32)), None)
    assert not out.any()


@pytest.mark.parametrize("mode", ["parallel", "recurrent"])
def test_msr_modes_agree(params, rng, mode):
    x = rng.normal(size=(2, 11, 32))
    states = [rng.normal(size=(2, 4, 8, 8)) * 0.1][0]
    ref, ref_s = msr_forward(params.layers[0].msr, x, states, 3, "chunkwise", chunk_size=4)
    out, s = msr_forward(params.layers[0].msr, x, states, 3, mode)
    assert rel_err(out, ref) < 1e-8 and rel_err(s, ref_s) < 1e-8


def test_group_norm_constant_head_is_zero():
    y = np.concatenate([np.full((3, 4), 2.5), np.arange(12.0).reshape(3, 4)], axis=-1)
    out = group_norm(y, 2, np.ones(8), np.zeros(8), 1e-6)
    assert not out[:, :4].any()
    np.testing.assert_allclose(out[:, 4:].mean(axis=-1), 0, atol=1e-12)


def test_msr_errors(params, rng):
    with pytest.raises(ValueError):
        msr_forward(params.layers[0].msr, rng.normal(size=(3, 31)), None)
    with pytest.raises(ValueError):
        msr_forward(params.layers[0].msr, rng.normal(size=(3, 32)), None, token_offset=-1)
    with pytest.raises(ValueError):
        msr_forward(params.layers[0].msr, rng.normal(size=(3, 32)), None, mode="sideways")


def test_zero_weights_make_layer_identity(params, rng):
    layer = params.layers[0]
    zero = dataclasses.replace(
        layer,
        msr=dataclasses.replace(layer.msr, w_o=np.zeros((32, 32))),
        ffn_w1=np.zeros_like(layer.ffn_w1),
        ffn_w2=np.zeros_like(layer.ffn_w2),
    )
    x = rng.normal(size=(6, 32))
    out, _ = layer_forward(zero, x, None)
    np.testing.assert_array_equal(out, x)


def test_ffn_of_zero(params):
    assert not ffn(params.layers[0], np.zeros((2, 32))).any()


def test_layer_matches_composed_oracle(params, rng):
    x = rng.normal(size=(9, 32))
    states = rng.normal(size=(4, 8, 8)) * 0.3
    out, s = layer_forward(params.layers[1], x, states, token_offset=17)
    ref, ref_s = naive_layer(params.layers[1], x, states, 17)
    assert rel_err(out, ref) < 1e-12
    assert rel_err(s, ref_s) < 1e-12


def test_single_chunk_equals_parallel(params, rng):
    x = rng.normal(size=(13, 32))
    (out,), states = stack_forward_chunkwise(params, [x])
    ref, ref_s = stack_forward(params, x, mode="parallel")
    assert rel_err(out, ref) < 1e-8
    assert max(rel_err(a, b) for a, b in zip(states, ref_s)) < 1e-8


def test_chunk_split_sweep(params, rng):
    x = rng.normal(size=(30, 32))
    ref, ref_s = naive_stack(params, x)
    for size in (5, 10, 15, 30):
        outs, states = stack_forward_chunkwise(params, [x[i:i + size] for i in range(0, 30, size)])
        assert rel_err(np.concatenate(outs), ref) < 1e-8
        assert max(rel_err(a, b) for a, b in zip(states, ref_s)) < 1e-8


def test_one_layer_stack_is_layer_forward(rng):
    p = init_stack(small_config(n_layers=1), seed=2)
    x = rng.normal(size=(5, 16))
    out, (s,) = stack_forward(p, x)
    ref, ref_s = layer_forward(p.layers[0], x, None)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(s, ref_s)


def test_empty_chunk_list(params):
    with pytest.raises(ValueError):
        stack_forward_chunkwise(params, [])


def test_deterministic(params, rng):
    x = rng.normal(size=(8, 32))
    a, sa = stack_forward(params, x)
    b, sb = stack_forward(params, x)
    np.testing.assert_array_equal(a, b)
    for u, v in zip(sa, sb):
        np.testing.assert_array_equal(u, v)


def test_seeded_init_reproducible():
    a, b = init_stack(small_config(), seed=9), init_stack(small_config(), seed=9)
    np.testing.assert_array_equal(a.layers[1].msr.w_k, b.layers[1].msr.w_k)
    assert not np.array_equal(a.layers[1].msr.w_k, init_stack(small_config(), seed=10).layers[1].msr.w_k)


def test_float32_stack_close(params, rng):
    x = rng.normal(size=(6, 32))
    ref, _ = stack_forward(params, x)
    out, states = stack_forward(params.astype(np.float32), x.astype(np.float32))
    assert out.dtype == np.float32 and states[0].dtype == np.float32
    assert rel_err(out, ref) < 1e-4
