"""Autoregressive report decoder over region representations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .config import DecoderConfig
from .layers import FeedForward, MultiHeadAttention, causal_mask, init_linear_, sinusoidal_table
from .tokenizer import BOS, EOS, PAD

# tokens never emitted during generation
_BLOCKED = (PAD, BOS)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, memory_mask, self_mask):
        h = self.norm1(x)
        a, _ = self.self_attn(h, h, h, attn_mask=self_mask)
        x = x + self.drop(a)
        h = self.norm2(x)
        c, cw = self.cross_attn(h, memory, memory, key_padding_mask=memory_mask)
        x = x + self.drop(c)
        x = x + self.drop(self.ffn(self.norm3(x)))
        return x, cw


class ReportDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        if cfg.vocab_size is None:
            raise ValueError("decoder config needs vocab_size")
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.layers = nn.ModuleList(
            DecoderLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        init_linear_(self)

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed(tokens)
        return x + sinusoidal_table(tokens.shape[1], self.cfg.d_model, x.dtype).to(x.device)

    def forward(self, tokens, memory, memory_mask=None, context=None, return_weights=False):
        """Logits (B, T, V) for input tokens (B, T) given memory (B, N, d).

        Row i depends on tokens[:, :i+1] only. ``context`` is an optional
        callable applied positionwise to the token embeddings.
        """
        x = self.embed_tokens(tokens)
        if context is not None:
            x = context(x)
        x = self.drop(x)
        mask = causal_mask(tokens.shape[1], tokens.device)
        cross = []
        for layer in self.layers:
            x, cw = layer(x, memory, memory_mask, mask)
            cross.append(cw)
        logits = self.out(self.norm(x))
        if return_weights:
            return logits, cross
        return logits


@dataclass
class GenerationOutput:
    token_ids: list[int]  # generated tokens, BOS excluded, EOS included when reached
    log_prob: float
    finished: bool = True
    step_log_probs: list[float] = field(default_factory=list)


@dataclass(order=False)
class BeamHypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool = False
    step: int = 0


StepFn = Callable[[torch.Tensor], torch.Tensor]


def _step_log_probs(step_fn: StepFn, prefixes: list[tuple[int, ...]]) -> np.ndarray:
    """Next-token log-probabilities (float64) for equal-length prefixes."""
    batch = torch.tensor([[BOS, *p] for p in prefixes], dtype=torch.long)
    with torch.no_grad():
        logits = step_fn(batch)[:, -1]
        lp = torch.log_softmax(logits.double(), dim=-1)
    return lp.cpu().numpy()


def greedy_generate(step_fn: StepFn, max_len: int) -> GenerationOutput:
    """Argmax decoding; ``max_len`` bounds the number of generated tokens."""
    tokens: list[int] = []
    total = 0.0
    steps = []
    for _ in range(max_len):
        lp = _step_log_probs(step_fn, [tuple(tokens)])[0]
        lp[list(_BLOCKED)] = -np.inf
        # rank on the running total, as beam search does, so rounding ties agree
        scores = np.array([total + float(v) for v in lp])
        tok = int(np.argmax(scores))  # first maximum, i.e. lowest id on ties
        tokens.append(tok)
        total = float(scores[tok])
        steps.append(float(lp[tok]))
        if tok == EOS:
            return GenerationOutput(tokens, total, True, steps)
    return GenerationOutput(tokens, total, False, steps)


def beam_search_generate(step_fn: StepFn, beam_size: int, max_len: int) -> GenerationOutput:
    """Beam search over summed log-probabilities, no length normalisation.

    Each step keeps the best ``beam_size`` expansions; those ending in EOS are
    set aside as finished. Search stops when no live hypothesis can beat the
    best finished one (scores never increase), when none remain, or at
    ``max_len``. Ties prefer the lexicographically smaller token sequence,
    then the earlier finish.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live = [BeamHypothesis((), 0.0)]
    finished: list[BeamHypothesis] = []
    for step in range(1, max_len + 1):
        lp = _step_log_probs(step_fn, [h.tokens for h in live])
        lp[:, list(_BLOCKED)] = -np.inf
        cands = []
        for h, row in zip(live, lp):
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append(BeamHypothesis(h.tokens + (int(tok),), h.score + float(row[tok])))
        cands.sort(key=lambda c: (-c.score, c.tokens))
        live = []
        for c in cands[:beam_size]:
            if c.tokens[-1] == EOS:
                finished.append(BeamHypothesis(c.tokens, c.score, True, step))
            else:
                live.append(c)
        if not live:
            break
        if finished:
            best_fin = max(f.score for f in finished)
            if best_fin >= max(h.score for h in live):
                break
    if finished:
        best = min(finished, key=lambda f: (-f.score, f.tokens, f.step))
        return GenerationOutput(list(best.tokens), best.score, True)
    best = min(live, key=lambda h: (-h.score, h.tokens))
    return GenerationOutput(list(best.tokens), best.score, False)


def sequence_log_prob(step_fn: StepFn, tokens: list[int]) -> float:
    """Sum of log P(y_i | y_<i) for generated ``tokens`` (BOS implied, excluded)."""
    if not tokens:
        return 0.0
    batch = torch.tensor([[BOS, *tokens[:-1]]], dtype=torch.long)
    with torch.no_grad():
        lp = torch.log_softmax(step_fn(batch)[0].double(), dim=-1)
    idx = torch.tensor(tokens, dtype=torch.long)
    return float(lp[torch.arange(len(tokens)), idx].sum())
