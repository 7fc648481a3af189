"""Attention primitives shared by the encoder, context memory and decoder.

Attention is written out by hand (rather than using ``nn.MultiheadAttention``)
so that per-head weights are always available for inspection and masking
behaviour is exact: masked keys receive a weight of exactly zero.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn


def sinusoidal_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sin/cos positional table of shape (length, dim), entries in [-1, 1]."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return table.to(dtype)


def masked_softmax(scores: torch.Tensor, mask: Optional[torch.Tensor], dim: int = -1) -> torch.Tensor:
    """Softmax where ``mask`` (True = excluded) forces an exact zero weight."""
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=dim)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads.

    ``key_padding_mask`` is (B, Lk) and ``attn_mask`` is broadcastable to
    (B, heads, Lq, Lk); in both True marks a disallowed key.
    """

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, length, _ = x.shape
        return x.view(b, length, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key, value, key_padding_mask=None, attn_mask=None):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)

        mask = None
        if key_padding_mask is not None:
            mask = key_padding_mask[:, None, None, :]
        if attn_mask is not None:
            mask = attn_mask if mask is None else (mask | attn_mask)
        weights = masked_softmax(scores, mask)

        out = self.dropout(weights) @ v  # B x h x Lq x hd
        b, _, lq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, lq, self.d_model)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        # GELU keeps the network smooth, which the finite-difference checks rely on
        self.net = nn.Sequential(
            nn.Linear(d_model, ffn_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, d_model),
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        a, w = self.attn(h, h, h, key_padding_mask=key_padding_mask)
        x = x + self.drop(a)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x, w


class EncoderStack(nn.Module):
    """A stack of ``EncoderLayer``; zero layers is the identity map."""

    def __init__(self, num_layers: int, d_model: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, heads, ffn_dim, dropout) for _ in range(num_layers)
        )

    def forward(self, x, key_padding_mask=None, return_weights=False):
        weights = []
        for layer in self.layers:
            x, w = layer(x, key_padding_mask)
            weights.append(w)
        if return_weights:
            return x, weights
        return x


class GatedAttentionPool(nn.Module):
    """Gated attention pooling (tanh branch times sigmoid branch, masked softmax).

    Collapses the second-to-last axis of ``x`` (..., L, d) into (..., d).
    Returns the pooled vectors and the weights (..., L).
    """

    def __init__(self, d_model: int, attn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attention_a = nn.Sequential(nn.Linear(d_model, attn_dim), nn.Tanh())
        self.attention_b = nn.Sequential(nn.Linear(d_model, attn_dim), nn.Sigmoid())
        self.attention_c = nn.Linear(attn_dim, 1)
        self.drop = nn.Dropout(dropout)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        a = self.attention_a(x)
        b = self.attention_b(x)
        return self.attention_c(self.drop(a * b)).squeeze(-1)

    def forward(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor] = None):
        w = masked_softmax(self.scores(x), pad_mask, dim=-1)
        pooled = (w.unsqueeze(-1) * x).sum(dim=-2)
        return pooled, w


def causal_mask(length: int, device=None) -> torch.Tensor:
    """Boolean (length, length) mask, True above the diagonal (future keys)."""
    return torch.ones(length, length, dtype=torch.bool, device=device).triu(1)


def init_linear_(module: nn.Module, std: float = 0.02) -> None:
    """Small-normal init for linear/embedding weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=std)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)


def pad_sequences(seqs: list[torch.Tensor]):
    """Stack variable-length (L_i, d) tensors into (B, Lmax, d) plus a pad mask."""
    lengths = [s.shape[0] for s in seqs]
    lmax = max(lengths)
    d = seqs[0].shape[-1]
    out = seqs[0].new_zeros(len(seqs), lmax, d)
    mask = torch.ones(len(seqs), lmax, dtype=torch.bool, device=seqs[0].device)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = False
    return out, mask


__all__ = [
    "sinusoidal_table",
    "masked_softmax",
    "MultiHeadAttention",
    "FeedForward",
    "EncoderLayer",
    "EncoderStack",
    "GatedAttentionPool",
    "causal_mask",
    "init_linear_",
    "pad_sequences",
]
