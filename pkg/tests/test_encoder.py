import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wsireport.config import REGION_SWEEP, EncoderConfig
from wsireport.encoder import LGHEncoder, MeanPoolEncoder, partition_regions
from wsireport.layers import EncoderStack, GatedAttentionPool, masked_softmax, sinusoidal_table


def enc_cfg(**kw):
    base = dict(region_size=4, d_model=16, d_in=8, heads=2, ffn_dim=32, pool_dim=8, dropout=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def make_encoder(dtype=torch.float64, **kw):
    torch.manual_seed(0)
    return LGHEncoder(enc_cfg(**kw)).to(dtype).eval()


# ------------------------------------------------------------------ partitioning


@pytest.mark.parametrize("n,S,real", [(200, 96, (96, 96, 8)), (96, 96, (96,)), (1, 96, (1,))])
def test_partition_counts(n, S, real):
    tok = torch.randn(5)
    part = partition_regions(torch.randn(n, 5), S, tok)
    assert part.num_regions == len(real)
    assert part.regions.shape == (len(real), S + 1, 5)
    unmasked_patches = (~part.pad_mask[:, :S]).sum(1).tolist()
    assert tuple(unmasked_patches) == real
    assert not part.pad_mask[:, S].any()  # region tokens never masked
    assert torch.equal(part.regions[:, S], tok.expand(len(real), 5))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 50), S=st.integers(1, 12))
def test_partition_reconstructs_input(n, S):
    x = torch.randn(n, 3)
    part = partition_regions(x, S, torch.zeros(3))
    assert torch.equal(part.patch_slots(), x)
    assert part.num_regions == math.ceil(n / S)
    assert int(part.pad_mask.sum()) == part.num_regions * S - n


def test_partition_empty_bag():
    with pytest.raises(ValueError):
        partition_regions(torch.zeros(0, 3), 4, torch.zeros(3))


def test_single_patch_bag_with_large_region():
    enc = make_encoder(region_size=96)
    out = enc(torch.randn(1, 8, dtype=torch.float64), return_weights=True)
    assert out.reps.shape == (1, 16)
    assert torch.isfinite(out.reps).all()
    w = out.pool_weights[0]
    assert (w[1:96] == 0).all()  # 95 padded slots
    assert torch.isclose(w[0] + w[96], torch.tensor(1.0, dtype=w.dtype))
    for pass_weights in out.local_weights:
        for layer_w in pass_weights:
            assert (layer_w[..., 1:96] == 0).all()


# ------------------------------------------------------------------ building blocks


def test_zero_layer_stack_is_identity():
    x = torch.randn(2, 5, 16)
    assert torch.equal(EncoderStack(0, 16, 2, 32)(x), x)


def test_equal_patches_give_equal_outputs_without_pe():
    enc = make_encoder(use_positional_encoding=False)
    v = torch.randn(1, 16, dtype=torch.float64).expand(4, 16)
    regions = torch.cat([v, enc.region_token.view(1, 16)], 0).unsqueeze(0)
    out = enc.encode_local(regions, torch.zeros(1, 5, dtype=torch.bool))
    assert torch.allclose(out[0, :4], out[0, :1].expand(4, 16), atol=1e-12)


def test_masked_columns_have_zero_weight():
    enc = make_encoder()
    out = enc(torch.randn(6, 8, dtype=torch.float64), return_weights=True)  # regions of 4 and 2 (+2 padded)
    for pass_weights in out.local_weights:
        for w in pass_weights:
            assert (w[1, :, :, 2:4] == 0).all()
            assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))


def test_global_single_region_is_deterministic():
    enc = make_encoder()
    t = torch.randn(1, 16, dtype=torch.float64)
    g, w = enc.encode_global(t, return_weights=True)
    assert torch.equal(g, enc.encode_global(t))
    assert all(torch.equal(x, torch.ones_like(x)) for x in w)
    with pytest.raises(ValueError):
        enc.encode_global(torch.zeros(0, 16, dtype=torch.float64))


def test_region_equivariance_without_pe():
    enc = make_encoder(use_positional_encoding=False)
    x = torch.randn(12, 8, dtype=torch.float64)  # three full regions
    perm = [2, 0, 1]
    permuted = torch.cat([x[4 * r : 4 * r + 4] for r in perm])
    assert torch.allclose(enc(permuted).reps, enc(x).reps[perm], atol=1e-12)


def test_within_region_permutation_invariance_without_global_layers():
    enc = make_encoder(use_positional_encoding=False, global_layers=0)
    x = torch.randn(10, 8, dtype=torch.float64)
    y = x.clone()
    y[4:8] = x[[7, 5, 4, 6]]
    assert torch.allclose(enc(y).reps, enc(x).reps, atol=1e-12)


def test_pool_single_slot_and_shift_invariance():
    pool = GatedAttentionPool(16, 8).double()
    x = torch.randn(1, 5, 16, dtype=torch.float64)
    mask = torch.tensor([[True, True, False, True, True]])
    pooled, w = pool(x, mask)
    assert torch.equal(w, torch.tensor([[0.0, 0.0, 1.0, 0.0, 0.0]], dtype=torch.float64))
    assert torch.allclose(pooled[0], x[0, 2])
    _, w_all = pool(torch.randn(3, 7, 16, dtype=torch.float64))
    assert torch.allclose(w_all.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    s = torch.randn(2, 6, dtype=torch.float64)
    m = torch.zeros(2, 6, dtype=torch.bool)
    m[1, 4:] = True
    assert torch.allclose(masked_softmax(s, m), masked_softmax(s + 3.7, m), atol=1e-15)


def test_sinusoidal_table_bounded_and_deterministic():
    t = sinusoidal_table(50, 16)
    assert t.abs().max() <= 1.0
    assert torch.equal(t, sinusoidal_table(50, 16))
    assert torch.allclose(t[:, 0], torch.sin(torch.arange(50.0)), atol=1e-6)


# ------------------------------------------------------------------ full forward


@pytest.mark.parametrize("S", [3, 4])
def test_output_shape_contract(S):
    enc = make_encoder(region_size=S)
    for n in range(1, 4 * S + 2):
        assert enc(torch.randn(n, 8, dtype=torch.float64)).reps.shape == (math.ceil(n / S), 16)


def test_region_sweep_on_thousand_patches():
    x = torch.randn(1000, 8)
    for S in REGION_SWEEP:
        enc = LGHEncoder(enc_cfg(region_size=S, d_model=8, heads=2, ffn_dim=16)).eval()
        with torch.no_grad():
            out = enc(x)
        assert out.reps.shape == (math.ceil(1000 / S), 8)
        assert torch.isfinite(out.reps).all()


def test_padded_slot_gradients_are_zero():
    enc = make_encoder()
    part = enc.partition(torch.randn(6, 8, dtype=torch.float64))
    regions = part.regions.detach().clone().requires_grad_(True)
    part.regions = regions
    enc.forward_partition(part).reps.pow(2).sum().backward()
    assert (regions.grad[1, 2:4] == 0).all()
    assert (regions.grad[0] != 0).any()


def test_mean_pool_encoder():
    enc = MeanPoolEncoder(enc_cfg()).double()
    x = torch.randn(7, 8, dtype=torch.float64)
    out = enc(x)
    assert out.reps.shape == (1, 16)
    assert torch.allclose(out.reps[0], enc.input_proj(x).mean(0))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        enc_cfg(d_model=15, heads=2)
    with pytest.raises(ValueError):
        enc_cfg(region_size=0)
