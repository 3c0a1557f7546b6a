import numpy as np
import pytest
import torch

import reference_forward as ref
from pamfn.afm import ranked_mask
from pamfn.branch import ShapeError
from pamfn.cmfd import CrossModalDecoder, straight_through_mask


def _random_case(seed=0, b=2, t=4, k=3, d=6, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    mixed = torch.randn(b, t, d, dtype=dtype, generator=gen)
    mods = torch.randn(b, t, 3, d, dtype=dtype, generator=gen)
    cross = torch.randn(b, t, k, d, dtype=dtype, generator=gen)
    hard = torch.randint(1, k + 1, (b, t), generator=gen)
    mask = ranked_mask(hard, k, dtype=dtype)
    return mixed, mods, cross, mask


# --- straight-through mask -----------------------------------------------------

def test_st_mask_forward_is_bit_exact():
    mask_bar = ranked_mask(torch.tensor([2, 3]), 4)
    relaxed = torch.rand(2, 4, requires_grad=True)
    out = straight_through_mask(mask_bar, relaxed)
    assert torch.equal(out, mask_bar)


def test_st_mask_routes_gradient_to_relaxed():
    mask_bar = ranked_mask(torch.tensor([1, 2]), 3, xi=-5.0, dtype=torch.float64)
    coeff = torch.randn(2, 3, dtype=torch.float64)

    relaxed = torch.rand(2, 3, dtype=torch.float64, requires_grad=True)
    loss = (torch.softmax(straight_through_mask(mask_bar, relaxed), -1) * coeff).sum()
    (grad_relaxed,) = torch.autograd.grad(loss, relaxed)

    direct = mask_bar.clone().requires_grad_()
    loss2 = (torch.softmax(direct, -1) * coeff).sum()
    (grad_mask,) = torch.autograd.grad(loss2, direct)
    torch.testing.assert_close(grad_relaxed, grad_mask)


def test_st_mask_anchor_exposes_relaxed_displacement():
    mask_bar = torch.zeros(3)
    relaxed = torch.tensor([0.2, 0.3, 0.5])
    anchor = torch.tensor([0.1, 0.3, 0.6])
    out = straight_through_mask(mask_bar, relaxed, anchor)
    torch.testing.assert_close(out, relaxed - anchor)
    # With the anchor at the current relaxed value the forward is still hard.
    assert torch.equal(straight_through_mask(mask_bar, relaxed, relaxed.clone()), mask_bar)


def test_st_mask_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        straight_through_mask(torch.zeros(2, 3), torch.zeros(2, 4))


# --- decoder ---------------------------------------------------------------------

def test_decoder_shapes_and_reference():
    torch.manual_seed(0)
    decoder = CrossModalDecoder(d=6).double()
    mixed, mods, cross, mask = _random_case()
    out, weights = decoder(mixed, mods, cross, mask)
    assert out.shape == (2, 4, 6)
    assert weights.shape == (2, 4, 4, 3)  # four query rows over K experts
    ref_out, ref_w = ref.cmfd_forward(
        mixed.numpy(), mods.numpy(), cross.numpy(), mask.numpy(), decoder
    )
    np.testing.assert_allclose(out.detach().numpy(), ref_out, atol=1e-12)
    np.testing.assert_allclose(weights.detach().numpy(), ref_w, atol=1e-12)


def test_decoder_mask_silences_disabled_experts():
    torch.manual_seed(1)
    decoder = CrossModalDecoder(d=6).double()
    mixed, mods, cross, mask = _random_case(seed=2)
    _, weights = decoder(mixed, mods, cross, mask)
    disabled = mask < 0
    # Every disabled expert gets exactly zero attention from all four queries.
    assert (weights.transpose(-2, -1)[disabled] == 0).all()
    torch.testing.assert_close(
        weights.sum(-1), torch.ones(weights.shape[:-1], dtype=weights.dtype)
    )


def test_decoder_disabled_expert_features_cannot_leak():
    torch.manual_seed(3)
    decoder = CrossModalDecoder(d=6).double()
    mixed, mods, cross, mask = _random_case(seed=4)
    out, _ = decoder(mixed, mods, cross, mask)
    poisoned = cross.clone()
    poisoned[mask == mask.min()] = 1e6
    out2, _ = decoder(mixed, mods, poisoned, mask)
    torch.testing.assert_close(out, out2)


def test_decoder_none_mask_attends_everywhere():
    torch.manual_seed(5)
    decoder = CrossModalDecoder(d=6)
    mixed, mods, cross, _ = _random_case(dtype=torch.float32)
    _, weights = decoder(mixed, mods, cross, None)
    assert (weights > 0).all()


def test_decoder_output_is_sum_over_queries():
    torch.manual_seed(6)
    decoder = CrossModalDecoder(d=6).double()
    mixed, mods, cross, mask = _random_case(seed=7)
    out, weights = decoder(mixed, mods, cross, mask)
    v = decoder.w_v(cross)
    per_query = weights @ v
    torch.testing.assert_close(out, per_query.sum(dim=-2))


def test_decoder_rejects_bad_shapes():
    decoder = CrossModalDecoder(d=6)
    mixed, mods, cross, mask = _random_case(dtype=torch.float32)
    with pytest.raises(ShapeError, match="3 modality tokens"):
        decoder(mixed, mods[:, :, :2], cross, mask)
    with pytest.raises(ShapeError, match="mask shape"):
        decoder(mixed, mods, cross, mask[:, :, :-1])
