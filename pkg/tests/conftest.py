"""Shared toy configurations: small enough for CPU unit tests."""

import numpy as np
import pytest
import torch

from wsireport.config import CMCConfig, DecoderConfig, EncoderConfig, ModelConfig


def toy_model_config(arm="cmc_lgh", d_in=8, d_model=16, heads=2, region_size=4, vocab_size=12,
                     memory_size=10, num_prototypes=3, decoder_layers=2, max_len=12, dropout=0.0,
                     use_pe=True) -> ModelConfig:
    return ModelConfig(
        arm=arm,
        encoder=EncoderConfig(region_size=region_size, d_model=d_model, d_in=d_in, heads=heads,
                              ffn_dim=2 * d_model, pool_dim=8, dropout=dropout,
                              use_positional_encoding=use_pe),
        cmc=CMCConfig(memory_size=memory_size, num_prototypes=num_prototypes, heads=heads),
        decoder=DecoderConfig(layers=decoder_layers, heads=heads, d_model=d_model, ffn_dim=2 * d_model,
                              vocab_size=vocab_size, max_len=max_len, dropout=dropout),
    )


@pytest.fixture
def model_cfg():
    return toy_model_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
