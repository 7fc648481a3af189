"""Report-generation model assembling encoder, context memory and decoder.

Arms:
    base     projection + mean pooling into one pseudo-region + decoder
    cmc      base + context memory on both pathways
    lgh      hierarchical encoder + decoder
    cmc_lgh  hierarchical encoder + context memory + decoder (full model)

Each component is initialised from its own seed stream, so arms that share a
component start from identical weights for it under the same seed.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .cmc import CrossModalContext
from .config import ModelConfig
from .decoder import (
    GenerationOutput,
    ReportDecoder,
    beam_search_generate,
    greedy_generate,
    sequence_log_prob,
)
from .encoder import LGHEncoder, MeanPoolEncoder, RegionRepresentations
from .layers import pad_sequences


def component_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@contextlib.contextmanager
def seeded(seed: int, name: str):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(component_seed(seed, name))
        yield


class ReportGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        enc_cfg = cfg.encoder
        with seeded(seed, "encoder"):
            self.encoder = LGHEncoder(enc_cfg) if cfg.use_lgh else MeanPoolEncoder(enc_cfg)
        self.cmc: Optional[CrossModalContext] = None
        if cfg.use_cmc:
            with seeded(seed, "cmc"):
                self.cmc = CrossModalContext(enc_cfg.d_model, cfg.cmc)
        with seeded(seed, "decoder"):
            self.decoder = ReportDecoder(cfg.decoder)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.out.weight.dtype

    def _as_tensor(self, features) -> torch.Tensor:
        if not torch.is_tensor(features):
            features = torch.tensor(np.asarray(features))
        return features.to(self.dtype)

    # ------------------------------------------------------------ visual side

    def encode_bag(self, features) -> RegionRepresentations:
        """Region representations of one bag, enriched by the memory when enabled."""
        out = self.encoder(self._as_tensor(features))
        if self.cmc is not None:
            out.reps = self.cmc.visual_pass(out.reps)
        return out

    def encode_batch(self, bags: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
        reps = [self.encode_bag(b).reps for b in bags]
        return pad_sequences(reps)

    # ------------------------------------------------------------ text side

    def _context(self):
        return None if self.cmc is None else self.cmc.textual_pass

    def decode_teacher_forcing(self, memory, memory_mask, targets: torch.Tensor) -> torch.Tensor:
        """Logits (B, T-1, V) predicting targets[:, 1:] from targets[:, :-1]."""
        if targets.shape[1] > self.cfg.decoder.max_len:
            raise ValueError(f"target length {targets.shape[1]} exceeds max_len {self.cfg.decoder.max_len}")
        return self.decoder(targets[:, :-1], memory, memory_mask, context=self._context())

    def forward(self, bags: Sequence, targets: torch.Tensor) -> torch.Tensor:
        memory, mask = self.encode_batch(bags)
        return self.decode_teacher_forcing(memory, mask, targets)

    # ------------------------------------------------------------ generation

    def step_fn(self, features):
        """Callable mapping (k, t) prefixes to (k, t, V) logits for one bag."""
        with torch.no_grad():
            reps = self.encode_bag(features).reps.unsqueeze(0)
        context = self._context()

        def fn(prefixes: torch.Tensor) -> torch.Tensor:
            mem = reps.expand(prefixes.shape[0], -1, -1)
            return self.decoder(prefixes, mem, None, context=context)

        return fn

    def _max_new(self, max_len: Optional[int]) -> int:
        # decoder max_len counts BOS and EOS; generation counts emitted tokens
        return (max_len or self.cfg.decoder.max_len) - 1

    @torch.no_grad()
    def generate(self, features, beam_size: Optional[int] = None, max_len: Optional[int] = None) -> GenerationOutput:
        was_training = self.training
        self.eval()
        try:
            k = beam_size or self.cfg.decoder.beam_size
            fn = self.step_fn(features)
            if k == 1:
                return greedy_generate(fn, self._max_new(max_len))
            return beam_search_generate(fn, k, self._max_new(max_len))
        finally:
            self.train(was_training)

    @torch.no_grad()
    def log_prob_of_sequence(self, features, tokens: list[int]) -> float:
        was_training = self.training
        self.eval()
        try:
            return sequence_log_prob(self.step_fn(features), tokens)
        finally:
            self.train(was_training)
