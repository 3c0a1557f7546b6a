"""Modality-specific branch: embedding, temporal conv stages, and regression head.

All public modules take and return time-major batched tensors of shape
``(B, T, d)``; the channel-major layout needed by 1-D convolutions is an
internal detail. The conv stage is also reused by the mixed branch and by the
fusion experts.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    """Input tensor shape is inconsistent with the module's configuration."""


def halved_length(t: int) -> int:
    return math.ceil(t / 2)


def halve_pool(x: Tensor) -> Tensor:
    """Average-pool the time axis with kernel 2, stride 2: (B, T, d) -> (B, ceil(T/2), d).

    For odd T the last window holds a single element, which is carried through
    unchanged (the average of one value).
    """
    return F.avg_pool1d(x.transpose(1, 2), kernel_size=2, stride=2, ceil_mode=True).transpose(1, 2)


class ConvStage(nn.Module):
    """Residual temporal conv block followed by 2x temporal downsampling.

    Two kernel-3 / padding-1 convolutions, each followed by batch
    normalization and a rectifier, plus an identity skip; then average
    pooling halves the time axis (ceil on odd lengths).
    """

    def __init__(self, d: int, use_norm: bool = True):
        super().__init__()
        self.conv1 = nn.Conv1d(d, d, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(d, d, kernel_size=3, padding=1)
        self.norm1 = nn.BatchNorm1d(d) if use_norm else nn.Identity()
        self.norm2 = nn.BatchNorm1d(d) if use_norm else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        h = x.transpose(1, 2)  # (B, d, T)
        y = F.relu(self.norm1(self.conv1(h)))
        y = F.relu(self.norm2(self.conv2(y)))
        y = y + h
        y = F.avg_pool1d(y, kernel_size=2, stride=2, ceil_mode=True)
        return y.transpose(1, 2)


class RegressionHead(nn.Module):
    """Temporal average -> dropout -> linear -> sigmoid, output strictly in (0, 1)."""

    def __init__(self, d: int, dropout: float = 0.3):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(d, 1)

    def forward(self, x: Tensor) -> Tensor:
        pooled = x.mean(dim=1)
        score = torch.sigmoid(self.linear(self.dropout(pooled))).squeeze(-1)
        eps = torch.finfo(score.dtype).eps
        return score.clamp(eps, 1.0 - eps)


class ModalityBranch(nn.Module):
    """One modality tower: embed to width d, N conv stages, regression head.

    ``forward`` returns every intermediate stage feature (index 0 is the
    embedded sequence) so the mixed branch can read them, plus the branch's
    own score.
    """

    def __init__(self, in_dim: int, d: int, n_stages: int, dropout: float = 0.3):
        super().__init__()
        if n_stages < 1 or d < 1:
            raise ValueError(f"need n_stages >= 1 and d >= 1, got {n_stages}, {d}")
        self.in_dim = in_dim
        self.embed = nn.Linear(in_dim, d)
        self.stages = nn.ModuleList(ConvStage(d) for _ in range(n_stages))
        self.head = RegressionHead(d, dropout)

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"expected input (B, T, {self.in_dim}), got {tuple(x.shape)}"
            )
        feats = [self.embed(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats, self.head(feats[-1])
