"""Central finite-difference verification of analytic gradients.

Every suite builds a tiny double-precision probe, computes autograd gradients
of a scalar loss, then re-derives each parameter's gradient element by element
from (f(p+h) - f(p-h)) / 2h and compares per parameter tensor. Routing noise
is pinned so the sampled decisions are identical across perturbed evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from .afm import AdaptiveFusionModule, sample_gumbel
from .branch import ModalityBranch, halved_length
from .cmfd import CrossModalDecoder, straight_through_mask
from .data import FeatureDims
from .msfd import ModalitySpecificDecoder
from .network import ModelConfig, PAMFN
from .training import apply_phase2_freeze, mse_loss

FD_STEP = 1e-4
TOLERANCE = 1e-4
# Tensors whose largest gradient falls below this are compared at this
# absolute scale instead (covers parameters the loss genuinely ignores).
GRAD_FLOOR = 1e-6

SUITES = ("branch", "msfd", "afm", "cmfd", "network")


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    rel_err: float
    max_analytic: float
    max_numeric: float
    passed: bool

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: rel_err={self.rel_err:.3e} "
            f"(|g|={self.max_analytic:.3e}, |fd|={self.max_numeric:.3e})"
        )


def finite_difference_grad(
    loss_fn: Callable[[], Tensor], param: Tensor, h: float = FD_STEP
) -> Tensor:
    """Central finite differences of ``loss_fn`` w.r.t. every element of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
            grad_flat[idx] = (up - down) / (2.0 * h)
    return grad


def check_parameters(
    loss_fn: Callable[[], Tensor],
    named_params: dict[str, Tensor],
    h: float = FD_STEP,
    tol: float = TOLERANCE,
) -> list[GradCheckResult]:
    """Compare autograd and finite-difference gradients parameter by parameter.

    A tensor that fails at step ``h`` is retried at smaller steps before being
    reported: a rectifier kink sitting within ``h`` of the evaluation point
    makes the two-sided difference meaningless, and shrinking the step below
    the kink distance removes that artifact. A genuinely wrong analytic
    gradient disagrees with the (converging) finite difference at every step
    size, so real defects still fail.
    """
    params = list(named_params.values())
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    results = []
    for (name, param), grad in zip(named_params.items(), analytic):
        a = torch.zeros_like(param) if grad is None else grad
        max_a = float(a.abs().max())
        for step in (h, h / 16.0, h / 256.0):
            n = finite_difference_grad(loss_fn, param, step)
            max_n = float(n.abs().max())
            denom = max(max_a, max_n, GRAD_FLOOR)
            rel = float((a - n).abs().max()) / denom
            if rel <= tol:
                break
        results.append(GradCheckResult(name, rel, max_a, max_n, rel <= tol))
    return results


# --- probes ------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeSpec:
    """Tiny double-precision configuration all suites run at."""

    d: int = 8
    n_stages: int = 2
    k_experts: int = 3
    t: int = 6
    batch: int = 2
    dims: tuple[int, int, int] = (5, 6, 7)
    seed: int = 0


def _probe_inputs(spec: ProbeSpec, generator: torch.Generator):
    tensors = tuple(
        torch.randn(spec.batch, spec.t, dim, dtype=torch.float64, generator=generator)
        for dim in spec.dims
    )
    labels = torch.rand(spec.batch, dtype=torch.float64, generator=generator)
    return tensors, labels


def build_branch_probe(spec: ProbeSpec = ProbeSpec()):
    gen = torch.Generator().manual_seed(spec.seed)
    torch.manual_seed(spec.seed)
    branch = ModalityBranch(spec.dims[0], spec.d, spec.n_stages, dropout=0.0).double()
    branch.train()
    x = torch.randn(spec.batch, spec.t, spec.dims[0], dtype=torch.float64, generator=gen)
    y = torch.rand(spec.batch, dtype=torch.float64, generator=gen)

    def loss_fn() -> Tensor:
        return mse_loss(branch(x)[1], y)

    return loss_fn, dict(branch.named_parameters())


def build_msfd_probe(spec: ProbeSpec = ProbeSpec()):
    gen = torch.Generator().manual_seed(spec.seed)
    torch.manual_seed(spec.seed)
    decoder = ModalitySpecificDecoder(spec.d).double()
    mixed = torch.randn(spec.batch, spec.t, spec.d, dtype=torch.float64, generator=gen)
    mods = torch.randn(spec.batch, spec.t, 3, spec.d, dtype=torch.float64, generator=gen)
    target = torch.randn(spec.batch, spec.t, spec.d, dtype=torch.float64, generator=gen)

    def loss_fn() -> Tensor:
        out, _ = decoder(mixed, mods)
        return ((out - target) ** 2).mean()

    return loss_fn, dict(decoder.named_parameters())


def build_afm_probe(spec: ProbeSpec = ProbeSpec()):
    """AFM with pinned Gumbel noise, consumed through the straight-through mask.

    The straight-through detach term is anchored at its base-point value so
    the probed function is an ordinary differentiable function whose analytic
    gradient equals the estimator's (see ``straight_through_mask``).
    """
    gen = torch.Generator().manual_seed(spec.seed)
    torch.manual_seed(spec.seed)
    afm = AdaptiveFusionModule(spec.d, spec.k_experts).double()
    afm.train()
    t_out = halved_length(spec.t)
    mods_prev = torch.randn(spec.batch, spec.t, 3, spec.d, dtype=torch.float64, generator=gen)
    noise = sample_gumbel(
        (spec.batch, t_out, spec.k_experts), dtype=torch.float64, generator=gen
    )
    target = torch.randn(spec.batch, t_out, spec.d, dtype=torch.float64, generator=gen)
    with torch.no_grad():
        _, base_decision, _ = afm(mods_prev, noise=noise)
        anchor = base_decision.relaxed.clone()

    def loss_fn() -> Tensor:
        cross, decision, mask_bar = afm(mods_prev, noise=noise)
        mask = straight_through_mask(mask_bar, decision.relaxed, anchor)
        weights = torch.softmax(mask, dim=-1)
        out = (weights.unsqueeze(-1) * cross).sum(dim=-2)
        return ((out - target) ** 2).mean()

    return loss_fn, dict(afm.named_parameters())


def build_cmfd_probe(spec: ProbeSpec = ProbeSpec()):
    gen = torch.Generator().manual_seed(spec.seed)
    torch.manual_seed(spec.seed)
    decoder = CrossModalDecoder(spec.d).double()
    mixed = torch.randn(spec.batch, spec.t, spec.d, dtype=torch.float64, generator=gen)
    mods = torch.randn(spec.batch, spec.t, 3, spec.d, dtype=torch.float64, generator=gen)
    cross = torch.randn(
        spec.batch, spec.t, spec.k_experts, spec.d, dtype=torch.float64, generator=gen
    )
    hard = torch.randint(
        1, spec.k_experts + 1, (spec.batch, spec.t), generator=gen
    )
    from .afm import ranked_mask

    mask = ranked_mask(hard, spec.k_experts, dtype=torch.float64)
    target = torch.randn(spec.batch, spec.t, spec.d, dtype=torch.float64, generator=gen)

    def loss_fn() -> Tensor:
        out, _ = decoder(mixed, mods, cross, mask)
        return ((out - target) ** 2).mean()

    return loss_fn, dict(decoder.named_parameters())


def build_phase2_probe(spec: ProbeSpec = ProbeSpec()):
    """Full network under phase-2 training semantics: RGB/flow frozen, rest checked.

    Dropout is disabled and the per-stage Gumbel draws are pinned, so the loss
    is a smooth deterministic function of the trainable parameters (the
    argmax decisions stay constant under the tiny FD perturbations; the probe
    asserts a healthy decision margin to guarantee that).
    """
    gen = torch.Generator().manual_seed(spec.seed)
    torch.manual_seed(spec.seed)
    config = ModelConfig(
        d=spec.d, n_stages=spec.n_stages, k_experts=spec.k_experts, dropout=0.0
    )
    model = PAMFN(config, FeatureDims(*spec.dims)).double()
    apply_phase2_freeze(model)
    model.train()
    for m in ("rgb", "flow"):
        model.branches[m].eval()

    # Move every parameter off its init point. Fresh init is a measure-zero
    # degenerate configuration for differentiation: the zero-initialized
    # mixed branch feeds constant activations into its first stage, parking
    # normalization biases exactly on the rectifier kinks, where two-sided
    # differences are meaningless for any implementation.
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, dtype=torch.float64, generator=gen))

    tensors, labels = _probe_inputs(spec, gen)
    noise = {}
    t_i = spec.t
    for i in range(1, spec.n_stages + 1):
        t_i = halved_length(t_i)
        noise[i] = sample_gumbel(
            (spec.batch, t_i, spec.k_experts), dtype=torch.float64, generator=gen
        )

    # Guard against knife-edge routing: if any decision's top-two scores are
    # closer than the FD perturbation could move them, the probe seed must
    # change rather than silently produce garbage differences. The same pass
    # records the base relaxed decisions, which anchor the straight-through
    # masks so finite differences see the estimator's gradient.
    anchors = {}
    with torch.no_grad():
        _, trace = model(*tensors, noise=noise)
        for i, decision in trace.decisions.items():
            anchors[i] = decision.relaxed.clone()
            z = torch.log(decision.probs + 1e-12) + noise[i]
            top2 = z.topk(2, dim=-1).values
            margin = float((top2[..., 0] - top2[..., 1]).min())
            if margin < 1e-2:
                raise RuntimeError(
                    f"probe seed {spec.seed} gives near-tied routing at stage {i} "
                    f"(margin {margin:.2e}); choose a different seed"
                )

    def loss_fn() -> Tensor:
        score, _ = model(*tensors, noise=noise, relaxed_anchor=anchors)
        return mse_loss(score, labels)

    trainable = {
        name: p for name, p in model.named_parameters() if p.requires_grad
    }
    return loss_fn, trainable


_BUILDERS = {
    "branch": build_branch_probe,
    "msfd": build_msfd_probe,
    "afm": build_afm_probe,
    "cmfd": build_cmfd_probe,
    "network": build_phase2_probe,
}


def run_suite(name: str, spec: ProbeSpec = ProbeSpec()) -> list[GradCheckResult]:
    if name not in _BUILDERS:
        raise ValueError(f"unknown suite {name!r}, expected one of {SUITES}")
    loss_fn, params = _BUILDERS[name](spec)
    results = check_parameters(loss_fn, params)
    return [
        GradCheckResult(f"{name}.{r.name}", r.rel_err, r.max_analytic, r.max_numeric, r.passed)
        for r in results
    ]


def run_all_suites(
    names: tuple[str, ...] = SUITES, spec: ProbeSpec = ProbeSpec()
) -> list[GradCheckResult]:
    results = []
    for name in names:
        results.extend(run_suite(name, spec))
    return results
