import math
import warnings

import numpy as np
import pytest
import torch

from conftest import toy_model_config
from wsireport.config import EncoderConfig, FinetuneConfig
from wsireport.model import ReportGenerator
from wsireport.tokenizer import build_vocab
from wsireport.training import Checkpoint
from wsireport.transfer import (
    TaskSample,
    TransferModel,
    discretize_times,
    finetune,
    format_table,
    hazards_and_risk,
    load_pretrained_encoder,
    quantile_edges,
    summarize,
    survival_nll,
)


def enc_cfg():
    return EncoderConfig(region_size=4, d_model=16, d_in=8, heads=2, ffn_dim=32, pool_dim=8, dropout=0.0)


def test_pool_single_region_and_permutation_invariance():
    model = TransferModel(enc_cfg(), "classification", 3).double()
    one = torch.randn(1, 16, dtype=torch.float64)
    pooled, w = model.pool_wsi(one)
    assert torch.allclose(pooled, one[0]) and torch.equal(w, torch.ones_like(w))
    reps = torch.randn(5, 16, dtype=torch.float64)
    a, wa = model.pool_wsi(reps)
    b, _ = model.pool_wsi(reps[[3, 1, 4, 0, 2]])
    assert torch.allclose(a, b, atol=1e-12)
    assert torch.isclose(wa.sum(), torch.tensor(1.0, dtype=torch.float64))


def test_classifier_probabilities():
    model = TransferModel(enc_cfg(), "classification", 4).double().eval()
    with torch.no_grad():
        p = model.classify_forward(torch.randn(11, 8, dtype=torch.float64))
    assert p.shape == (4,)
    assert abs(p.sum().item() - 1) < 1e-6
    # small-std initialisation keeps untrained probabilities near uniform
    assert (p - 0.25).abs().max() < 0.05


def test_hazards_and_risk_limits_and_monotonicity():
    h, risk = hazards_and_risk(torch.full((4,), -50.0, dtype=torch.float64))
    assert (h < 1e-20).all() and risk.item() < 1e-20
    z = torch.randn(4, dtype=torch.float64)
    _, r0 = hazards_and_risk(z)
    for b in range(4):
        dz = torch.zeros(4, dtype=torch.float64)
        dz[b] = 1e-4
        assert hazards_and_risk(z + dz)[1] > r0
    # risk is -sum log S_b
    s = torch.cumprod(1 - torch.sigmoid(z), 0)
    assert torch.allclose(r0, -torch.log(s).sum())


def test_survival_nll_matches_likelihood():
    z = torch.randn(4, dtype=torch.float64)
    h = torch.sigmoid(z)
    # event in bin 2: survive bins 0, 1 then hazard in bin 2
    expected = -(torch.log(1 - h[0]) + torch.log(1 - h[1]) + torch.log(h[2]))
    assert torch.allclose(survival_nll(z, 2, False), expected)
    # censored in bin 2: survived through bin 2
    expected_c = -(torch.log(1 - h[:3]).sum())
    assert torch.allclose(survival_nll(z, 2, True), expected_c)


def test_quantile_bins():
    times = np.arange(1, 101, dtype=float)
    edges = quantile_edges(times, 4)
    assert len(edges) == 3
    bins = discretize_times(times, edges)
    assert np.bincount(bins).tolist() == [25, 25, 25, 25]


def planted_classification(n=24, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.eye(2, 8) * 3
    out = []
    for i in range(n):
        y = i % 2
        k = int(rng.integers(3, 12))
        out.append(TaskSample(f"s{i}", np.tile(centers[y], (k, 1)).astype(np.float32), label=y))
    return out


def test_finetune_single_fold_and_summary():
    cfg = FinetuneConfig(learning_rate=1e-2, epochs=8, batch_size=4, monte_carlo_folds=1, split_ratios=(0.5, 0.0, 0.5))
    rows = finetune(planted_classification(), "classification", enc_cfg(), cfg)
    assert len(rows) == 1 and set(rows[0]) == {"Acc", "AUC", "fold"}
    s = summarize([{"Acc": 0.5}, {"Acc": 1.0}], ["Acc"])
    assert s["Acc"] == (0.75, 0.25)
    table = format_table({"Scratch": s}, ["Acc"])
    assert table == "Methods,Acc\nScratch,0.750±0.250\n"


def test_single_class_fold_skipped_with_warning():
    samples = [TaskSample(f"s{i}", np.ones((3, 8), np.float32), label=0) for i in range(6)]
    samples[0].label = 1
    cfg = FinetuneConfig(epochs=1, monte_carlo_folds=2, split_ratios=(0.5, 0.0, 0.5), seed=1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = finetune(samples, "classification", enc_cfg(), cfg, num_classes=2)
    assert len(rows) < 2
    assert any("single-class" in str(w.message) for w in caught)


def test_survival_requires_positive_times():
    samples = [TaskSample("a", np.ones((3, 8), np.float32), time=0.0)]
    with pytest.raises(ValueError):
        finetune(samples, "survival", enc_cfg(), FinetuneConfig())


def test_frozen_encoder_only_moves_head():
    cfg = FinetuneConfig(learning_rate=1e-2, epochs=2, batch_size=4, monte_carlo_folds=1,
                         split_ratios=(0.5, 0.0, 0.5), freeze_encoder=True)
    from wsireport import transfer

    captured = {}
    original = transfer._train

    def spy(model, samples, c, edges, seed):
        before = {k: v.clone() for k, v in model.state_dict().items()}
        original(model, samples, c, edges, seed)
        captured["diff"] = {k for k, v in model.state_dict().items() if not torch.equal(v, before[k])}

    transfer._train = spy
    try:
        finetune(planted_classification(), "classification", enc_cfg(), cfg)
    finally:
        transfer._train = original
    assert captured["diff"]
    assert all(not k.startswith("encoder.") for k in captured["diff"])


def test_pretrained_encoder_weights_are_loaded():
    vocab = build_vocab(["tumor present ."], min_freq=1)
    cfg = toy_model_config(vocab_size=len(vocab))
    gen = ReportGenerator(cfg, seed=5)
    with torch.no_grad():
        for p in gen.encoder.parameters():
            p.add_(0.1)
    ckpt = Checkpoint.from_model(gen, vocab)
    model = TransferModel(cfg.encoder, "survival", 4)
    load_pretrained_encoder(model, ckpt)
    for k, v in model.encoder.state_dict().items():
        assert np.array_equal(v.numpy(), ckpt.state[f"encoder.{k}"])
    base_ckpt = Checkpoint.from_model(ReportGenerator(toy_model_config(arm="base", vocab_size=len(vocab))), vocab)
    with pytest.raises(ValueError):
        load_pretrained_encoder(model, base_ckpt)
