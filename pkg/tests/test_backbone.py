import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hygdl.backbone import Encoder, EncoderConfig, batch_mask, encode, patchify, random_mask, unpatchify
from hygdl.errors import DomainError, ShapeMismatch


def patchify_oracle(x, p):
    b, c, h, w = x.shape
    g = h // p
    out = np.zeros((b, g * g, p * p * c), dtype=x.dtype)
    for bi in range(b):
        for i in range(g):
            for j in range(g):
                for pi in range(p):
                    for pj in range(p):
                        for ci in range(c):
                            out[bi, i * g + j, (pi * p + pj) * c + ci] = x[bi, ci, i * p + pi, j * p + pj]
    return out


def test_patchify_shape_and_layout():
    x = torch.rand(1, 3, 8, 8)
    out = patchify(x, 4)
    assert out.shape == (1, 4, 48)
    np.testing.assert_array_equal(out.numpy(), patchify_oracle(x.numpy(), 4))


def test_single_patch_holds_whole_image():
    x = torch.rand(2, 3, 8, 8)
    out = patchify(x, 8)
    assert out.shape == (2, 1, 192)
    assert torch.equal(torch.sort(out[0, 0]).values, torch.sort(x[0].flatten()).values)


@pytest.mark.parametrize("p", [1, 2, 4, 8])
def test_round_trip_bit_exact(p):
    x = torch.rand(3, 3, 8, 8)
    assert torch.equal(unpatchify(patchify(x, p), p, 3), x)


def test_indivisible_size():
    with pytest.raises(ShapeMismatch):
        patchify(torch.rand(1, 3, 10, 10), 4)


def test_mask_count():
    mask, ids = random_mask(196, 0.75, 0)
    assert mask.sum() == 147
    assert sorted(ids.tolist()) == list(range(196))


def test_zero_ratio_masks_nothing():
    mask, _ = random_mask(64, 0.0, 3)
    assert not mask.any()


def test_mask_deterministic():
    a = random_mask(64, 0.75, 42)
    b = random_mask(64, 0.75, 42)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_mask_ratio_domain():
    with pytest.raises(DomainError):
        random_mask(10, 1.2, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_mask_invariants(n, ratio, seed):
    mask, ids = random_mask(n, ratio, seed)
    assert mask.sum() == round(ratio * n)
    assert np.array_equal(np.sort(ids), np.arange(n))
    # restoring order: visible-first shuffle, visible ones are the first n - |M|
    shuffle = np.argsort(ids)
    assert not mask[shuffle[: n - mask.sum()]].any()


def test_mask_uniform_over_positions():
    hits = np.zeros(16)
    for s in range(4000):
        hits += random_mask(16, 0.25, s)[0]
    # each position is masked with probability 1/4
    p = 0.25
    bound = 4 * np.sqrt(4000 * p * (1 - p))
    assert np.all(np.abs(hits - 4000 * p) < bound)


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return Encoder(EncoderConfig(img_size=32, patch_size=4, embed_dim=32, depth=2, num_heads=4))


def test_blank_mask_shapes(encoder):
    out = encode(encoder, torch.rand(2, 3, 32, 32))
    assert out.tokens.shape == (2, 64, 32)
    assert out.cls.shape == (2, 32)
    assert not out.mask.any()


def test_masked_shapes(encoder):
    mask, ids = batch_mask(2, 64, 0.75, 0)
    out = encode(encoder, torch.rand(2, 3, 32, 32), mask, ids)
    assert out.tokens.shape == (2, 16, 32)
    assert torch.equal(out.ids_restore, ids)


def test_mask_without_ids_restore(encoder):
    mask, _ = batch_mask(2, 64, 0.5, 1)
    out = encode(encoder, torch.rand(2, 3, 32, 32), mask)
    assert out.tokens.shape == (2, 32, 32)


def test_encode_deterministic(encoder):
    x = torch.rand(2, 3, 32, 32)
    mask, ids = batch_mask(2, 64, 0.75, 0)
    a, b = encode(encoder, x, mask, ids), encode(encoder, x, mask, ids)
    assert torch.equal(a.tokens, b.tokens) and torch.equal(a.cls, b.cls)


def test_masked_pass_ignores_hidden_patches(encoder):
    x = torch.rand(1, 3, 32, 32)
    mask, ids = batch_mask(1, 64, 0.75, 5)
    y = unpatchify(patchify(x, 4) + 10.0 * mask[..., None], 4)  # perturb hidden patches only
    assert torch.allclose(encode(encoder, x, mask, ids).cls, encode(encoder, y, mask, ids).cls)


def test_encode_shape_errors(encoder):
    with pytest.raises(ShapeMismatch):
        encode(encoder, torch.rand(2, 3, 16, 16))
    with pytest.raises(ShapeMismatch):
        encode(encoder, torch.rand(2, 3, 32, 32), torch.zeros(2, 10, dtype=torch.bool))


def test_cls_finite(encoder):
    assert torch.isfinite(encode(encoder, torch.rand(4, 3, 32, 32)).cls).all()
