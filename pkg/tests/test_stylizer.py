import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hygdl.errors import DomainError, EmptyFeatureMap, EmptyStylePool, ShapeMismatch
from hygdl.stylizer import (
    EPS,
    FeatureStats,
    StyleSource,
    adain,
    feature_stats,
    load_style_dir,
    sample_style_batch,
    stylize,
)


def test_constant_channel_floors_std():
    s = feature_stats(torch.full((1, 4, 4), 5.0))
    assert s.mean.item() == 5.0
    assert s.std.item() == pytest.approx(EPS)


def test_population_std():
    x = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
    s = feature_stats(x)
    vals = np.array([1.0, 3.0])
    assert s.mean.item() == pytest.approx(vals.mean())
    assert s.std.item() == pytest.approx(vals.std(ddof=0))
    assert s.std.item() == pytest.approx(1.0)


def test_permuted_channels_share_stats():
    a = torch.arange(9.0)
    x = torch.stack([a, a[torch.randperm(9)]]).reshape(2, 3, 3)
    s = feature_stats(x)
    assert torch.equal(s.mean[0], s.mean[1])
    assert torch.allclose(s.std[0], s.std[1])


def test_empty_feature_map():
    with pytest.raises(EmptyFeatureMap):
        feature_stats(torch.zeros(3, 0))


def test_batched_stats_shape():
    s = feature_stats(torch.rand(5, 3, 8, 8))
    assert s.mean.shape == (5, 3) and s.std.shape == (5, 3)


def test_adain_identity_at_zero():
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    target = FeatureStats(torch.rand(3, dtype=torch.float64), torch.rand(3, dtype=torch.float64) + 0.1)
    assert torch.allclose(adain(x, target, 0.0), x, atol=1e-6, rtol=0)


def test_adain_full_strength_hand_value():
    x = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
    out = adain(x, FeatureStats(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)), 1.0)
    assert torch.allclose(out, torch.tensor([[-1.0, 1.0]], dtype=torch.float64), atol=1e-9)


def test_adain_interpolated_statistics():
    x = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
    target = FeatureStats(torch.tensor([0.0], dtype=torch.float64), torch.tensor([3.0], dtype=torch.float64))
    out = adain(x, target, 0.5)
    # mixed mean 1, mixed std 2
    assert torch.allclose(out, torch.tensor([[-1.0, 3.0]], dtype=torch.float64), atol=1e-9)


def test_adain_errors():
    x = torch.rand(3, 4, 4)
    with pytest.raises(ShapeMismatch):
        adain(x, FeatureStats(torch.zeros(2), torch.ones(2)), 0.5)
    with pytest.raises(DomainError):
        adain(x, FeatureStats(torch.zeros(3), torch.ones(3)), 1.5)
    with pytest.raises(DomainError):
        adain(x, FeatureStats(torch.zeros(3), torch.ones(3)), -0.1)


def test_adain_full_strength_matches_target_stats():
    x = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    target = FeatureStats(torch.rand(4, 3, dtype=torch.float64), torch.rand(4, 3, dtype=torch.float64) + 0.05)
    got = feature_stats(adain(x, target, 1.0))
    assert torch.allclose(got.mean, target.mean, atol=1e-4)
    assert torch.allclose(got.std, target.std, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_adain_commutes_with_spatial_permutation(seed, alpha):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 25, generator=g, dtype=torch.float64)
    target = FeatureStats(torch.rand(3, generator=g, dtype=torch.float64),
                          torch.rand(3, generator=g, dtype=torch.float64) + 0.01)
    perm = torch.randperm(25, generator=g)
    assert torch.allclose(adain(x[:, perm], target, alpha), adain(x, target, alpha)[:, perm], atol=1e-12)


def test_stylize_zero_alpha_is_bit_exact():
    content = torch.rand(4, 3, 8, 8)
    assert torch.equal(stylize(content, torch.rand(4, 3, 8, 8), 0.0), content)
    assert torch.equal(stylize(content, None, 0.0), content)


def test_stylize_constant_style_statistics():
    content = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    color = torch.tensor([0.2, 0.5, 0.7], dtype=torch.float64)
    styles = color[None, :, None, None].expand(2, 3, 16, 16).clone()
    out = stylize(content, styles, 1.0)
    got = feature_stats(out)
    want = feature_stats(styles)
    assert torch.allclose(got.mean, want.mean, atol=1e-4)
    assert torch.allclose(got.std, want.std, atol=1e-4)


@pytest.mark.parametrize("space", ["rgb", "opponent"])
def test_stylize_deterministic_and_in_range(space):
    g = torch.Generator().manual_seed(0)
    content = torch.rand(3, 3, 8, 8, generator=g)
    styles = torch.rand(3, 3, 8, 8, generator=g)
    a = stylize(content, styles, 0.4, space)
    b = stylize(content, styles, 0.4, space)
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_stylize_constant_content_stays_finite():
    content = torch.full((2, 3, 8, 8), 0.3)
    styles = torch.full((2, 3, 8, 8), 0.9)
    out = stylize(content, styles, 0.5)
    assert torch.isfinite(out).all()


def test_stylize_errors():
    content = torch.rand(2, 3, 8, 8)
    with pytest.raises(EmptyStylePool):
        stylize(content, None, 0.3)
    with pytest.raises(ShapeMismatch):
        stylize(content, torch.rand(3, 3, 8, 8), 0.3)


def test_singleton_pool():
    img = torch.rand(1, 3, 4, 4)
    out = sample_style_batch(StyleSource(img, 5), 4, 0)
    assert out.shape == (4, 3, 4, 4)
    assert all(torch.equal(o, img[0]) for o in out)


def test_sampling_is_deterministic_in_seed_and_draw():
    src = StyleSource(torch.rand(20, 3, 4, 4), 11)
    assert torch.equal(sample_style_batch(src, 8, 3), sample_style_batch(src, 8, 3))
    assert not torch.equal(sample_style_batch(src, 8, 3), sample_style_batch(src, 8, 4))


def test_empty_pool():
    with pytest.raises(EmptyStylePool):
        sample_style_batch(StyleSource(torch.zeros(0, 3, 4, 4), 0), 2, 0)


def test_sampling_frequencies_are_uniform():
    n_pool = 10
    pool = torch.arange(n_pool, dtype=torch.float32).reshape(n_pool, 1, 1, 1)
    src = StyleSource(pool, 99)
    draws = torch.cat([sample_style_batch(src, 4, i).flatten() for i in range(3000)]).long().numpy()
    counts = np.bincount(draws, minlength=n_pool)
    n, p = len(draws), 1 / n_pool
    bound = 3 * np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= bound), counts
    assert stats.chisquare(counts).pvalue > 1e-3


def test_load_style_dir(tmp_path):
    from PIL import Image

    for i, color in enumerate([(255, 0, 0), (0, 255, 0)]):
        Image.new("RGB", (10, 10), color).save(tmp_path / f"s{i}.png")
    src = load_style_dir(tmp_path, 8)
    assert src.pool.shape == (2, 3, 8, 8)
    assert src.manifest == ["s0.png", "s1.png"]
    assert src.pool[0, 0].mean() == pytest.approx(1.0)
