import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hygdl.backbone import Encoder, EncoderConfig, batch_mask
from hygdl.decoder import (
    Decoder,
    DecoderConfig,
    ReconTarget,
    StyleInjection,
    decode_conditioned,
    masked_mse,
    token_instance_norm,
)
from hygdl.errors import EmptyMask, ShapeMismatch

ENC = EncoderConfig(img_size=16, patch_size=4, embed_dim=16, depth=1, num_heads=2)
DEC = DecoderConfig(embed_dim=16, depth=2, num_heads=2, style_dim=6)


@pytest.fixture
def parts():
    torch.manual_seed(0)
    enc = Encoder(ENC)
    dec = Decoder(DEC, ENC.embed_dim, ENC.num_patches, ENC.patch_dim)
    x = torch.rand(3, 3, 16, 16)
    mask, ids = batch_mask(3, ENC.num_patches, 0.75, (0, 0))
    return enc, dec, enc(x, mask, ids)


def test_output_shape(parts):
    _, dec, vis = parts
    out = decode_conditioned(dec, vis, torch.randn(3, 6))
    assert out.shape == (3, ENC.num_patches, ENC.patch_dim)


def test_style_changes_output(parts):
    _, dec, vis = parts
    a = dec(vis, torch.randn(3, 6))
    b = dec(vis, torch.randn(3, 6) * 5)
    assert (a - b).abs().max() > 1e-4


def test_identity_modulation_equals_unconditioned(parts):
    _, dec, vis = parts
    ones, zeros = torch.ones(3, DEC.embed_dim), torch.zeros(3, DEC.embed_dim)
    assert torch.equal(dec(vis, modulations=[(ones, zeros)] * DEC.depth), dec(vis))


def test_decoder_validates(parts):
    _, dec, vis = parts
    with pytest.raises(ShapeMismatch):
        dec(vis, torch.randn(3, 5))
    with pytest.raises(ShapeMismatch):
        dec(vis, modulations=[(torch.ones(3, 16), torch.zeros(3, 16))])
    with pytest.raises(ShapeMismatch):
        Decoder(DecoderConfig(depth=1), 16, 16, 48)


def test_instance_norm_statistics():
    x = torch.randn(2, 10, 4, dtype=torch.float64) * 3 + 1
    h = token_instance_norm(x)
    assert torch.allclose(h.mean(1), torch.zeros(2, 4, dtype=torch.float64), atol=1e-10)
    assert torch.allclose(h.var(1, unbiased=False), torch.ones(2, 4, dtype=torch.float64), atol=1e-4)


def test_injection_applies_scale_and_shift():
    inj = StyleInjection(3, 4).double()
    x = torch.randn(2, 5, 4, dtype=torch.float64)
    scale, shift = torch.full((2, 4), 2.0, dtype=torch.float64), torch.full((2, 4), -1.0, dtype=torch.float64)
    out = inj(x, modulation=(scale, shift))
    assert torch.allclose(out, token_instance_norm(x) * 2 - 1)


def test_shared_decoder_for_both_branches(parts):
    # the same weights serve self- and cross-reconstruction; only the style vector differs
    enc, dec, vis = parts
    s1, s2 = torch.randn(3, 6), torch.randn(3, 6)
    a = dec(vis, s1)
    b = dec(vis, s2)
    (a.sum() + b.sum()).backward()
    assert all(p.grad is not None for p in dec.inject.parameters())


def _target(patches, mask):
    return ReconTarget(patches, mask)


def test_masked_mse_hand_values():
    t = torch.zeros(1, 4, 3)
    mask = torch.tensor([[True, False, True, False]])
    assert masked_mse(t.clone(), _target(t, mask)).item() == 0.0
    assert masked_mse(t + 2, _target(t, mask)).item() == pytest.approx(4.0)
    pred = t.clone()
    pred[0, 0] = 1.0  # one masked patch off by 1 everywhere
    assert masked_mse(pred, _target(t, mask)).item() == pytest.approx(0.5)


def test_masked_mse_ignores_visible_and_has_no_gradient_there():
    t = torch.zeros(2, 4, 3)
    mask = torch.tensor([[True, False, False, False], [False, False, True, True]])
    pred = torch.randn(2, 4, 3)
    base = masked_mse(pred, _target(t, mask))
    pred2 = pred.clone()
    pred2[~mask] += 100.0
    assert masked_mse(pred2, _target(t, mask)).item() == pytest.approx(base.item())
    p = pred.clone().requires_grad_(True)
    masked_mse(p, _target(t, mask)).backward()
    assert (p.grad[~mask] == 0).all()
    assert (p.grad[mask] != 0).any()


def test_masked_mse_errors():
    t = torch.zeros(1, 4, 3)
    with pytest.raises(EmptyMask):
        masked_mse(t, _target(t, torch.zeros(1, 4, dtype=torch.bool)))
    with pytest.raises(ShapeMismatch):
        masked_mse(torch.zeros(1, 4, 2), _target(t, torch.ones(1, 4, dtype=torch.bool)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_masked_mse_matches_reference(seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.randn(3, 6, 5, generator=g, dtype=torch.float64)
    tgt = torch.randn(3, 6, 5, generator=g, dtype=torch.float64)
    mask = torch.rand(3, 6, generator=g) < 0.5
    mask[0, 0] = True
    ref = sum(((pred[b, i] - tgt[b, i]) ** 2).mean() for b in range(3) for i in range(6) if mask[b, i]) / mask.sum()
    assert masked_mse(pred, _target(tgt, mask)).item() == pytest.approx(ref.item(), rel=1e-12)
    assert masked_mse(pred, _target(tgt, mask)).item() >= 0
