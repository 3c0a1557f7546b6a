"""Cross-modal feature decoder: masked negated cross-attention over expert outputs.

Queries come from the mixed feature and the three modality features of the
current stage; keys and values from the K expert outputs. The additive mask
disables the experts the routing decision did not enable, and its
straight-through construction lets the policy receive gradients even though
the forward mask is hard.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .branch import ShapeError
from .msfd import negated_attention


def straight_through_mask(
    mask_bar: Tensor, relaxed: Tensor, anchor: Tensor | None = None
) -> Tensor:
    """Hard mask in the forward pass, relaxed-decision gradient in the backward pass.

    Numerically equal to ``mask_bar`` bit-for-bit; the derivative of any
    downstream scalar with respect to ``relaxed`` equals its derivative with
    respect to the mask.

    ``anchor`` replaces the detached copy of ``relaxed`` with a fixed tensor.
    Passing the base-point value of ``relaxed`` turns the estimator into an
    ordinary differentiable function that finite differences can probe (equal
    to the hard mask at the base point, equal to the estimator's gradient
    everywhere); training never sets it.
    """
    if mask_bar.shape != relaxed.shape:
        raise ShapeError(
            f"mask shape {tuple(mask_bar.shape)} != relaxed shape {tuple(relaxed.shape)}"
        )
    detached = relaxed.detach() if anchor is None else anchor
    return mask_bar + (relaxed - detached)


class CrossModalDecoder(nn.Module):
    """Single-head masked negated cross-attention injecting expert features.

    Four query rows per time step — the mixed feature plus the three stage-i
    modality features — attend over the K expert outputs; the four per-query
    results are summed into one d-vector. Parameters are per-stage.
    """

    def __init__(self, d: int):
        super().__init__()
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)

    def forward(
        self, mixed: Tensor, mods: Tensor, cross: Tensor, mask: Tensor | None
    ) -> tuple[Tensor, Tensor]:
        """mixed (B,T,d), mods (B,T,3,d), cross (B,T,K,d), mask (B,T,K) or None
        -> (output (B,T,d), weights (B,T,4,K))."""
        if mods.shape[-2] != 3:
            raise ShapeError(f"expected 3 modality tokens, got {mods.shape[-2]}")
        if mask is not None and mask.shape != cross.shape[:-1]:
            raise ShapeError(
                f"mask shape {tuple(mask.shape)} != expert axis {tuple(cross.shape[:-1])}"
            )
        queries = torch.cat([mixed.unsqueeze(-2), mods], dim=-2)  # (B, T, 4, d)
        q = self.w_q(queries)
        k = self.w_k(cross)
        v = self.w_v(cross)
        additive = mask.unsqueeze(-2) if mask is not None else None  # broadcast over queries
        out, weights = negated_attention(q, k, v, additive)
        return out.sum(dim=-2), weights
