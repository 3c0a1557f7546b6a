"""Modality-specific feature decoder: per-time-step negated cross-attention.

The decoder reads, for each time step, the information in the three modality
features that is *least* similar to the current mixed feature: attention
logits are the negated scaled dot products, so dissimilar tokens receive the
largest weights.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def negated_attention(
    query: Tensor, keys: Tensor, values: Tensor, mask: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Attention with negated scaled dot-product logits.

    query: (..., Q, d); keys/values: (..., S, d); optional additive mask
    broadcastable to (..., Q, S). Returns (output (..., Q, d), weights
    (..., Q, S)); each weight row sums to 1.
    """
    d = query.shape[-1]
    logits = -(query @ keys.transpose(-1, -2)) / math.sqrt(d)
    if mask is not None:
        logits = logits + mask
    weights = torch.softmax(logits, dim=-1)
    return weights @ values, weights


class ModalitySpecificDecoder(nn.Module):
    """Single-head negated cross-attention from the mixed feature onto the 3 modality tokens.

    Applied independently at every time step: the query comes from the mixed
    feature, keys and values from the stacked modality features of the same
    stage. Parameters are not shared across stages; the network owns one
    decoder per stage.
    """

    def __init__(self, d: int):
        super().__init__()
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)

    def forward(self, mixed: Tensor, mods: Tensor) -> tuple[Tensor, Tensor]:
        """mixed: (B, T, d); mods: (B, T, 3, d) -> (output (B, T, d), weights (B, T, 3))."""
        if mods.shape[-2] != 3:
            raise ValueError(f"expected 3 modality tokens, got {mods.shape[-2]}")
        q = self.w_q(mixed).unsqueeze(-2)  # (B, T, 1, d)
        k = self.w_k(mods)
        v = self.w_v(mods)
        out, weights = negated_attention(q, k, v)
        return out.squeeze(-2), weights.squeeze(-2)
