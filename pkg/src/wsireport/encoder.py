"""Visual encoders: the local-global hierarchical encoder and the mean-pool baseline.

The hierarchical encoder splits a bag of n projected patch features into
N = ceil(n / S) regions of S slots plus one region token, runs a region-level
transformer, lets region tokens exchange information through a WSI-level
transformer, writes them back, re-runs the region-level transformer and pools
each region with gated attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .config import EncoderConfig
from .layers import EncoderStack, GatedAttentionPool, init_linear_, sinusoidal_table


@dataclass
class RegionPartition:
    regions: torch.Tensor  # (N, S+1, d); slot S holds the region token
    pad_mask: torch.Tensor  # (N, S+1) bool, True on padded patch slots
    n_patches: int

    @property
    def num_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def region_size(self) -> int:
        return self.regions.shape[1] - 1

    def patch_slots(self) -> torch.Tensor:
        """Unpadded patch slots in order, (n, d)."""
        body = self.regions[:, :-1].reshape(-1, self.regions.shape[-1])
        return body[: self.n_patches]


@dataclass
class RegionRepresentations:
    reps: torch.Tensor  # (N, d)
    pool_weights: torch.Tensor  # (N, S+1)
    local_weights: Optional[list] = None  # per E_l pass, per layer: (N, heads, S+1, S+1)
    global_weights: Optional[list] = None


def num_regions(n: int, region_size: int) -> int:
    return math.ceil(n / region_size)


def partition_regions(x: torch.Tensor, region_size: int, region_token: torch.Tensor) -> RegionPartition:
    """Split projected patches ``x`` (n, d) into zero-padded regions with a region token."""
    n, d = x.shape
    if n == 0:
        raise ValueError("cannot partition an empty bag")
    N = num_regions(n, region_size)
    pad = N * region_size - n
    if pad:
        x = torch.cat([x, x.new_zeros(pad, d)], dim=0)
    body = x.view(N, region_size, d)
    tok = region_token.view(1, 1, d).expand(N, 1, d).to(x.dtype)
    regions = torch.cat([body, tok], dim=1)
    mask = torch.zeros(N, region_size + 1, dtype=torch.bool, device=x.device)
    if pad:
        mask[-1, region_size - pad : region_size] = True
    return RegionPartition(regions, mask, n)


class LGHEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.input_proj = nn.Linear(cfg.d_in, d)
        self.region_token = nn.Parameter(torch.zeros(d))
        self.local_encoder = EncoderStack(cfg.local_layers, d, cfg.heads, cfg.ffn_dim, cfg.dropout)
        self.global_encoder = EncoderStack(cfg.global_layers, d, cfg.heads, cfg.ffn_dim, cfg.dropout)
        self.pool = GatedAttentionPool(d, cfg.pool_dim, cfg.dropout)
        init_linear_(self)
        nn.init.normal_(self.region_token, std=0.02)

    def partition(self, features: torch.Tensor) -> RegionPartition:
        return partition_regions(self.input_proj(features), self.cfg.region_size, self.region_token)

    def _pe(self, length: int, like: torch.Tensor) -> torch.Tensor:
        return sinusoidal_table(length, self.cfg.d_model, like.dtype).to(like.device)

    def encode_local(self, regions, pad_mask, return_weights=False):
        return self.local_encoder(regions, key_padding_mask=pad_mask, return_weights=return_weights)

    def encode_global(self, tokens: torch.Tensor, return_weights=False):
        """Run E_g over the (N, d) region tokens; PE over region index when enabled."""
        if tokens.shape[0] == 0:
            raise ValueError("no region tokens")
        if self.cfg.use_positional_encoding:
            tokens = tokens + self._pe(tokens.shape[0], tokens)
        out = self.global_encoder(tokens.unsqueeze(0), return_weights=return_weights)
        if return_weights:
            return out[0].squeeze(0), out[1]
        return out.squeeze(0)

    def forward_partition(self, part: RegionPartition, return_weights: bool = False) -> RegionRepresentations:
        h, mask = part.regions, part.pad_mask
        if self.cfg.use_positional_encoding:
            h = h + self._pe(h.shape[1], h)
        h, w_local1 = self.encode_local(h, mask, return_weights=True)
        g, w_global = self.encode_global(h[:, -1], return_weights=True)
        h = torch.cat([h[:, :-1], g.unsqueeze(1)], dim=1)
        h, w_local2 = self.encode_local(h, mask, return_weights=True)
        reps, pool_w = self.pool(h, mask)
        if not return_weights:
            return RegionRepresentations(reps, pool_w)
        return RegionRepresentations(reps, pool_w, [w_local1, w_local2], w_global)

    def forward(self, features: torch.Tensor, return_weights: bool = False) -> RegionRepresentations:
        return self.forward_partition(self.partition(features), return_weights)


class MeanPoolEncoder(nn.Module):
    """Projection followed by mean pooling into a single pseudo-region."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.d_in, cfg.d_model)
        init_linear_(self)

    def forward(self, features: torch.Tensor, return_weights: bool = False) -> RegionRepresentations:
        x = self.input_proj(features)
        n = x.shape[0]
        w = x.new_full((1, n), 1.0 / n)
        return RegionRepresentations(x.mean(dim=0, keepdim=True), w)
