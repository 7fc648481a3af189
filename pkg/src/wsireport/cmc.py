"""Cross-modal context memory shared by the visual and textual pathways.

A learnable memory of m context vectors is queried with scaled dot-product
attention. Visual sequences are first compressed to l prototype vectors by
cross-attention with learnable prototype queries; the memory responses are
broadcast back to the original positions through the (transposed, renormalised)
prototype attention. Token embeddings query the memory directly, one response
per token. Both pathways fuse responses residually through an elementwise gate
that starts at zero, so a fresh module is an exact identity.

The memory is updated only through gradient descent during training.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import CMCConfig
from .layers import MultiHeadAttention, init_linear_


class CrossModalContext(nn.Module):
    def __init__(self, d_model: int, cfg: CMCConfig):
        super().__init__()
        self.cfg = cfg
        self.memory = nn.Parameter(torch.empty(cfg.memory_size, d_model))
        self.prototypes = nn.Parameter(torch.empty(cfg.num_prototypes, d_model))
        self.prototype_attn = MultiHeadAttention(d_model, cfg.heads)
        self.memory_attn = MultiHeadAttention(d_model, cfg.heads)
        self.visual_proj = nn.Linear(d_model, d_model)
        self.text_proj = nn.Linear(d_model, d_model)
        self.visual_gate = nn.Parameter(torch.zeros(d_model))
        self.text_gate = nn.Parameter(torch.zeros(d_model))
        init_linear_(self)
        nn.init.normal_(self.memory, std=1.0)
        nn.init.normal_(self.prototypes, std=1.0)

    def select_prototypes(self, visual: torch.Tensor):
        """Compress (L, d) visual features to (l, d); also returns (heads, l, L) weights."""
        if visual.shape[0] == 0:
            raise ValueError("empty visual sequence")
        q = self.prototypes.unsqueeze(0).to(visual.dtype)
        out, w = self.prototype_attn(q, visual.unsqueeze(0), visual.unsqueeze(0))
        return out.squeeze(0), w.squeeze(0)

    def query_memory(self, queries: torch.Tensor):
        """Attend from (..., q, d) queries over memory rows; returns responses and weights."""
        squeeze = queries.dim() == 2
        if squeeze:
            queries = queries.unsqueeze(0)
        mem = self.memory.unsqueeze(0).expand(queries.shape[0], -1, -1)
        out, w = self.memory_attn(queries, mem, mem)
        if squeeze:
            return out.squeeze(0), w.squeeze(0)
        return out, w

    @staticmethod
    def aggregate(original: torch.Tensor, response: torch.Tensor, proj: nn.Linear, gate: torch.Tensor):
        if original.shape != response.shape:
            raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(response.shape)}")
        return original + gate * proj(response)

    @staticmethod
    def broadcast_back(responses: torch.Tensor, proto_weights: torch.Tensor) -> torch.Tensor:
        """Map (l, d) prototype responses to (L, d) via the transposed head-mean attention."""
        a = proto_weights.mean(dim=0).transpose(0, 1)  # L x l
        a = a / a.sum(dim=1, keepdim=True)
        return a @ responses

    def visual_pass(self, visual: torch.Tensor, return_weights: bool = False):
        protos, pw = self.select_prototypes(visual)
        resp, mw = self.query_memory(protos)
        out = self.aggregate(visual, self.broadcast_back(resp, pw), self.visual_proj, self.visual_gate)
        if return_weights:
            return out, {"prototype": pw, "memory": mw}
        return out

    def textual_pass(self, tokens: torch.Tensor, return_weights: bool = False):
        """Positionwise enrichment of (..., t, d) token embeddings."""
        if tokens.shape[-2] == 0:
            raise ValueError("no tokens")
        resp, mw = self.query_memory(tokens)
        out = self.aggregate(tokens, resp, self.text_proj, self.text_gate)
        if return_weights:
            return out, {"memory": mw}
        return out
