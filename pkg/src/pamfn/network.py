"""Full model assembly: progressive mixed-branch aggregation, ablations, baselines.

The mixed branch starts from zeros and, at every stage i, adds what the two
decoders extract: ``f_i = h_i + ms_i + cm_i`` where ``h_i`` is the mixed conv
stage output, ``ms_i`` the modality-specific decoder output, and ``cm_i`` the
cross-modal decoder output. Ablation variants drop or replace the decoder
terms; late-fusion baselines skip the mixed branch entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
from torch import Tensor, nn

from . import MODALITIES
from .afm import VARIANTS, AdaptiveFusionModule, Decision
from .branch import ConvStage, ModalityBranch, RegressionHead, ShapeError
from .cmfd import CrossModalDecoder, straight_through_mask
from .data import FeatureDims
from .msfd import ModalitySpecificDecoder

DECODER_VARIANTS = (
    "full",
    "no_msfd",
    "no_cmfd",
    "weighted_for_msfd",
    "weighted_for_cmfd",
    "weighted_for_both",
)

BASELINES = ("avg", "cat", "weighted", "attention")


class ConfigError(ValueError):
    """Model configuration is internally inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    n_stages: int = 3
    k_experts: int = 10
    dropout: float = 0.3
    xi: float = -1e9
    tau_init: float = 10.0
    # None = fuse at every stage; an explicit empty tuple disables fusion
    # everywhere (pure mixed conv stages).
    fusion_stages: tuple[int, ...] | None = None
    fusion_variant: str = "ranked"
    decoder_variant: str = "full"

    def resolved_fusion_stages(self) -> tuple[int, ...]:
        if self.fusion_stages is None:
            return tuple(range(1, self.n_stages + 1))
        return tuple(sorted(set(self.fusion_stages)))

    def validate(self) -> None:
        if self.d < 1 or self.n_stages < 1 or self.k_experts < 1:
            raise ConfigError(
                f"d, n_stages, k_experts must be positive, got "
                f"{self.d}, {self.n_stages}, {self.k_experts}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.xi >= 0:
            raise ConfigError(f"xi must be a large negative number, got {self.xi}")
        if self.tau_init <= 0:
            raise ConfigError(f"tau_init must be positive, got {self.tau_init}")
        if self.fusion_variant not in VARIANTS:
            raise ConfigError(f"fusion_variant must be one of {VARIANTS}")
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ConfigError(f"decoder_variant must be one of {DECODER_VARIANTS}")
        stages = self.resolved_fusion_stages()
        if any(i < 1 or i > self.n_stages for i in stages):
            raise ConfigError(
                f"fusion_stages {stages} outside 1..{self.n_stages}"
            )

    def to_dict(self) -> dict:
        doc = asdict(self)
        if doc["fusion_stages"] is not None:
            doc["fusion_stages"] = list(doc["fusion_stages"])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        if doc.get("fusion_stages") is not None:
            doc["fusion_stages"] = tuple(doc["fusion_stages"])
        try:
            cfg = cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class ForwardTrace:
    """Per-stage intermediates of one forward pass, for inspection and dumps."""

    mixed: list[Tensor] = field(default_factory=list)
    ms_outputs: dict[int, Tensor] = field(default_factory=dict)
    cm_outputs: dict[int, Tensor] = field(default_factory=dict)
    decisions: dict[int, Decision] = field(default_factory=dict)
    masks: dict[int, Tensor] = field(default_factory=dict)
    branch_scores: dict[str, Tensor] = field(default_factory=dict)


class WeightedSum(nn.Module):
    """Softmax-weighted sum over a token axis with learnable scalar logits.

    Stand-in used by the ablations that replace a decoder with plain weighted
    fusion of the same inputs; an optional additive mask keeps disabled
    tokens out of the softmax.
    """

    def __init__(self, n_tokens: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_tokens))

    def forward(self, tokens: Tensor, mask: Tensor | None = None) -> Tensor:
        w = self.logits
        if mask is not None:
            w = w + mask
        weights = torch.softmax(w, dim=-1)
        return (weights.unsqueeze(-1) * tokens).sum(dim=-2)


class PAMFN(nn.Module):
    """Three modality branches plus the progressively aggregating mixed branch."""

    def __init__(self, config: ModelConfig, feature_dims: FeatureDims):
        super().__init__()
        config.validate()
        feature_dims.validate()
        self.config = config
        self.feature_dims = feature_dims
        d, n = config.d, config.n_stages
        self.branches = nn.ModuleDict(
            {m: ModalityBranch(feature_dims.of(m), d, n, config.dropout) for m in MODALITIES}
        )
        self.mixed_stages = nn.ModuleList(ConvStage(d) for _ in range(n))
        self.mixed_head = RegressionHead(d, config.dropout)

        use_ms = config.decoder_variant != "no_msfd"
        use_cm = config.decoder_variant != "no_cmfd"
        ms_weighted = config.decoder_variant in ("weighted_for_msfd", "weighted_for_both")
        cm_weighted = config.decoder_variant in ("weighted_for_cmfd", "weighted_for_both")

        self.msfd = nn.ModuleDict()
        self.afm = nn.ModuleDict()
        self.cmfd = nn.ModuleDict()
        for i in config.resolved_fusion_stages():
            key = str(i)
            if use_ms:
                self.msfd[key] = WeightedSum(3) if ms_weighted else ModalitySpecificDecoder(d)
            if use_cm:
                self.afm[key] = AdaptiveFusionModule(
                    d, config.k_experts, config.tau_init, config.xi, config.fusion_variant
                )
                self.cmfd[key] = WeightedSum(config.k_experts) if cm_weighted else CrossModalDecoder(d)

    def forward(
        self,
        rgb: Tensor,
        flow: Tensor,
        audio: Tensor,
        generator: torch.Generator | None = None,
        noise: dict[int, Tensor] | None = None,
        relaxed_anchor: dict[int, Tensor] | None = None,
    ) -> tuple[Tensor, ForwardTrace]:
        """Score a batch: inputs are (B, T, D_m) raw feature windows.

        ``generator`` drives training-time routing decisions; ``noise`` pins
        the per-stage Gumbel draws instead (keyed by stage index), and
        ``relaxed_anchor`` pins the straight-through masks' detached term for
        finite-difference verification.
        """
        trace = ForwardTrace()
        branch_stages: dict[str, list[Tensor]] = {}
        for m, x in zip(MODALITIES, (rgb, flow, audio)):
            feats, score_m = self.branches[m](x)
            branch_stages[m] = feats
            trace.branch_scores[m] = score_m

        t0 = branch_stages["rgb"][0].shape[1]
        mixed = branch_stages["rgb"][0].new_zeros(rgb.shape[0], t0, self.config.d)
        trace.mixed.append(mixed)

        for i in range(1, self.config.n_stages + 1):
            key = str(i)
            h = self.mixed_stages[i - 1](mixed)
            f = h
            mods_i = torch.stack([branch_stages[m][i] for m in MODALITIES], dim=-2)
            if key in self.msfd:
                decoder = self.msfd[key]
                if isinstance(decoder, WeightedSum):
                    ms = decoder(mods_i)
                else:
                    ms, _ = decoder(h, mods_i)
                trace.ms_outputs[i] = ms
                f = f + ms
            if key in self.afm:
                mods_prev = torch.stack([branch_stages[m][i - 1] for m in MODALITIES], dim=-2)
                stage_noise = noise.get(i) if noise is not None else None
                cross, decision, mask_bar = self.afm[key](
                    mods_prev, generator=generator, noise=stage_noise
                )
                if decision is not None and self.training:
                    anchor = relaxed_anchor.get(i) if relaxed_anchor is not None else None
                    mask = straight_through_mask(mask_bar, decision.relaxed, anchor)
                else:
                    mask = mask_bar
                decoder = self.cmfd[key]
                if isinstance(decoder, WeightedSum):
                    cm = decoder(cross, mask)
                else:
                    cm, _ = decoder(h, mods_i, cross, mask)
                if decision is not None:
                    trace.decisions[i] = decision
                trace.masks[i] = mask_bar
                trace.cm_outputs[i] = cm
                f = f + cm
            mixed = f
            trace.mixed.append(mixed)

        score = self.mixed_head(mixed)
        return score, trace


class BranchScorer(nn.Module):
    """Adapter giving a single modality branch the full three-input interface.

    Lets a phase-1 checkpoint run through the same evaluation harness as the
    fusion models.
    """

    def __init__(self, branch: ModalityBranch, modality: str):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        self.branch = branch
        self.modality = modality

    def forward(
        self,
        rgb: Tensor,
        flow: Tensor,
        audio: Tensor,
        generator: torch.Generator | None = None,
        noise: dict[int, Tensor] | None = None,
        relaxed_anchor: dict[int, Tensor] | None = None,
    ) -> tuple[Tensor, ForwardTrace]:
        inputs = dict(zip(MODALITIES, (rgb, flow, audio)))
        trace = ForwardTrace()
        feats, score = self.branch(inputs[self.modality])
        trace.mixed.append(feats[-1])
        trace.branch_scores[self.modality] = score
        return score, trace


class LateFusionBaseline(nn.Module):
    """Late fusion over the three stage-N feature sequences, then a shared head.

    Strategies: ``avg`` (plain mean), ``cat`` (concatenate + linear
    reduction), ``weighted`` (three learnable scalars, softmaxed), and
    ``attention`` (per-time-step weights from the concatenated features).
    """

    def __init__(self, strategy: str, config: ModelConfig, feature_dims: FeatureDims):
        super().__init__()
        if strategy not in BASELINES:
            raise ConfigError(f"unknown baseline {strategy!r}, expected one of {BASELINES}")
        config.validate()
        self.strategy = strategy
        self.config = config
        self.feature_dims = feature_dims
        d = config.d
        self.branches = nn.ModuleDict(
            {m: ModalityBranch(feature_dims.of(m), d, config.n_stages, config.dropout)
             for m in MODALITIES}
        )
        if strategy == "cat":
            self.reduce = nn.Linear(3 * d, d)
        elif strategy == "weighted":
            self.logits = nn.Parameter(torch.zeros(3))
        elif strategy == "attention":
            self.attend = nn.Linear(3 * d, 3)
        self.head = RegressionHead(d, config.dropout)

    def forward(
        self,
        rgb: Tensor,
        flow: Tensor,
        audio: Tensor,
        generator: torch.Generator | None = None,
        noise: dict[int, Tensor] | None = None,
        relaxed_anchor: dict[int, Tensor] | None = None,
    ) -> tuple[Tensor, ForwardTrace]:
        trace = ForwardTrace()
        finals = []
        for m, x in zip(MODALITIES, (rgb, flow, audio)):
            feats, score_m = self.branches[m](x)
            finals.append(feats[-1])
            trace.branch_scores[m] = score_m
        stacked = torch.stack(finals, dim=-2)  # (B, T_N, 3, d)
        if self.strategy == "avg":
            fused = stacked.mean(dim=-2)
        elif self.strategy == "cat":
            fused = self.reduce(stacked.flatten(-2))
        elif self.strategy == "weighted":
            weights = torch.softmax(self.logits, dim=-1)
            fused = (weights.unsqueeze(-1) * stacked).sum(dim=-2)
        else:  # attention
            weights = torch.softmax(self.attend(stacked.flatten(-2)), dim=-1)
            fused = (weights.unsqueeze(-1) * stacked).sum(dim=-2)
        trace.mixed.append(fused)
        return self.head(fused), trace


def build_model(
    config: ModelConfig, feature_dims: FeatureDims, baseline: str | None = None
) -> nn.Module:
    if baseline is not None:
        return LateFusionBaseline(baseline, config, feature_dims)
    return PAMFN(config, feature_dims)
