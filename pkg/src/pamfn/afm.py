"""Adaptive fusion module: K ranked fusion experts plus a routing policy.

Each expert ("FusionNet") mixes the three transformed modality features with
its own per-time-step softmax attention and runs the result through its own
conv stage, so stage-(i-1) inputs come out at the stage-i length. A policy
network scores how many of the top-ranked experts to enable; during training
the decision is sampled with the Gumbel-Max trick and the straight-through
relaxation carries its gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .branch import ConvStage, ShapeError, halve_pool

VARIANTS = ("ranked", "unranked", "free")

TAU_MIN = 0.05
TAU_MAX = 100.0
LOG_EPS = 1e-12
XI = -1e9


@dataclass
class Decision:
    """Per-time-step routing outcome.

    ``hard`` is the 1-based number of enabled experts (or the single enabled
    expert index in the unranked variant), ``relaxed`` the differentiable
    softmax relaxation over the K options, ``probs`` the policy distribution,
    and ``gumbel`` the noise draw (None for greedy decisions).
    """

    hard: Tensor
    relaxed: Tensor
    probs: Tensor
    gumbel: Tensor | None = None


def sample_gumbel(
    shape: tuple[int, ...],
    *,
    dtype: torch.dtype = torch.float32,
    device=None,
    generator: torch.Generator | None = None,
) -> Tensor:
    u = torch.rand(shape, dtype=dtype, device=device, generator=generator)
    u = u.clamp_min(torch.finfo(dtype).tiny)
    return -torch.log(-torch.log(u))


def sample_decision(
    probs: Tensor,
    tau: Tensor | float,
    *,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Decision:
    """Draw a hard decision from ``probs`` via Gumbel-Max, plus its relaxation.

    probs: (..., K) rows summing to 1. The hard decision is
    ``argmax_k(log p_k + G_k) + 1`` (1-based) and is distributed exactly
    according to ``probs``; the relaxation is ``softmax((log p + G) / tau)``
    over the same noise draw. Pass ``noise`` to pin the Gumbel variables
    (gradient checking); otherwise they come from ``generator``.
    """
    if noise is None:
        noise = sample_gumbel(tuple(probs.shape), dtype=probs.dtype,
                              device=probs.device, generator=generator)
    elif noise.shape != probs.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != probs shape {tuple(probs.shape)}")
    z = torch.log(probs + LOG_EPS) + noise
    hard = z.argmax(dim=-1) + 1
    relaxed = torch.softmax(z / tau, dim=-1)
    return Decision(hard=hard, relaxed=relaxed, probs=probs, gumbel=noise)


def greedy_decision(probs: Tensor) -> Decision:
    """Noise-free decision for inference: argmax of the policy distribution."""
    hard = probs.argmax(dim=-1) + 1
    relaxed = F.one_hot(hard - 1, probs.shape[-1]).to(probs.dtype)
    return Decision(hard=hard, relaxed=relaxed, probs=probs, gumbel=None)


def _check_hard(hard: Tensor, k_experts: int) -> None:
    if ((hard < 1) | (hard > k_experts)).any():
        raise ValueError(f"decision outside [1, {k_experts}]: {hard}")


def ranked_mask(
    hard: Tensor | int, k_experts: int, xi: float = XI, dtype: torch.dtype = torch.float32
) -> Tensor:
    """Additive attention mask enabling the first ``hard`` experts.

    Entries 1..hard are 0, the rest are the large negative ``xi``; shape is
    ``hard.shape + (k_experts,)``.
    """
    hard = torch.as_tensor(hard)
    _check_hard(hard, k_experts)
    idx = torch.arange(1, k_experts + 1, device=hard.device)
    return torch.where(idx <= hard.unsqueeze(-1), 0.0, xi).to(dtype)


def one_hot_mask(
    hard: Tensor | int, k_experts: int, xi: float = XI, dtype: torch.dtype = torch.float32
) -> Tensor:
    """Additive attention mask enabling exactly the expert indexed ``hard`` (1-based)."""
    hard = torch.as_tensor(hard)
    _check_hard(hard, k_experts)
    idx = torch.arange(1, k_experts + 1, device=hard.device)
    return torch.where(idx == hard.unsqueeze(-1), 0.0, xi).to(dtype)


class FusionNet(nn.Module):
    """One fusion expert: attention-weighted modality mixing plus a conv stage.

    The attention net maps the concatenated transformed modality features to
    three softmax weights per time step; the weighted sum then passes through
    the expert's own conv stage, halving the time axis. Experts share no
    parameters.
    """

    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d
        self.attention = nn.Sequential(
            nn.Linear(3 * d, hidden), nn.ReLU(), nn.Linear(hidden, 3)
        )
        self.stage = ConvStage(d)

    def mix(self, transformed: Tensor) -> tuple[Tensor, Tensor]:
        """(B, T, 3, d) -> (fused (B, T, d), weights (B, T, 3))."""
        alpha = torch.softmax(self.attention(transformed.flatten(-2)), dim=-1)
        fused = (alpha.unsqueeze(-1) * transformed).sum(dim=-2)
        return fused, alpha

    def forward(self, transformed: Tensor) -> Tensor:
        fused, _ = self.mix(transformed)
        return self.stage(fused)


class AdaptiveFusionModule(nn.Module):
    """Experts + policy for one stage.

    ``forward`` consumes the raw stage-(i-1) modality features stacked as
    (B, T_{i-1}, 3, d) and returns the K expert outputs (B, T_i, K, d), the
    per-time-step decision, and the hard additive mask (B, T_i, K). The
    ``free`` variant has no policy and always enables every expert; the
    ``unranked`` variant enables exactly the chosen expert instead of the
    top-``hard`` prefix.
    """

    def __init__(
        self,
        d: int,
        k_experts: int,
        tau_init: float = 10.0,
        xi: float = XI,
        variant: str = "ranked",
        hidden: int | None = None,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {variant!r}, expected one of {VARIANTS}")
        if k_experts < 1:
            raise ValueError(f"need at least one expert, got {k_experts}")
        hidden = hidden or d
        self.k_experts = k_experts
        self.variant = variant
        self.xi = xi
        self.transforms = nn.ModuleList(nn.Linear(d, d) for _ in range(3))
        self.fusion_nets = nn.ModuleList(FusionNet(d, hidden) for _ in range(k_experts))
        if variant != "free":
            self.policy = nn.Sequential(
                nn.Linear(3 * d, hidden), nn.ReLU(), nn.Linear(hidden, k_experts)
            )
            self.tau = nn.Parameter(torch.tensor(float(tau_init)))

    def clamped_tau(self) -> Tensor:
        return self.tau.clamp(TAU_MIN, TAU_MAX)

    def transform_modalities(self, mods: Tensor) -> Tensor:
        """Apply the three independent nonlinear projections: (B, T, 3, d) -> same shape."""
        if mods.shape[-2] != 3:
            raise ShapeError(f"expected 3 modality tokens, got {mods.shape[-2]}")
        return torch.stack(
            [F.relu(tr(mods[..., j, :])) for j, tr in enumerate(self.transforms)], dim=-2
        )

    def policy_probabilities(self, mods_prev: Tensor) -> Tensor:
        """Decision distribution per stage-i step from raw stage-(i-1) features.

        The three sequences are halve-pooled first so exactly one decision
        exists per stage-i time step: (B, T_{i-1}, 3, d) -> (B, T_i, K).
        """
        pooled = torch.stack(
            [halve_pool(mods_prev[..., j, :]) for j in range(3)], dim=-2
        )
        logits = self.policy(pooled.flatten(-2))
        return torch.softmax(logits, dim=-1)

    def forward(
        self,
        mods_prev: Tensor,
        generator: torch.Generator | None = None,
        noise: Tensor | None = None,
    ) -> tuple[Tensor, Decision | None, Tensor]:
        transformed = self.transform_modalities(mods_prev)
        cross = torch.stack([net(transformed) for net in self.fusion_nets], dim=-2)
        if self.variant == "free":
            return cross, None, cross.new_zeros(cross.shape[:-1])
        probs = self.policy_probabilities(mods_prev)
        if self.training:
            decision = sample_decision(
                probs, self.clamped_tau(), generator=generator, noise=noise
            )
        else:
            decision = greedy_decision(probs)
        mask_fn = ranked_mask if self.variant == "ranked" else one_hot_mask
        mask_bar = mask_fn(decision.hard, self.k_experts, self.xi, dtype=cross.dtype)
        return cross, decision, mask_bar
