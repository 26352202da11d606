"""Online stylization of content images by adaptive instance normalization.

The default backend works on per-channel pixel statistics, either in RGB or in
an orthonormal opponent color space where the channels are less correlated.
Interpolation by the strength ``alpha`` happens on the statistics, so
``alpha=0`` leaves the content untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DomainError, EmptyFeatureMap, EmptyStylePool, ShapeMismatch

EPS = 1e-5

# Orthonormal RGB -> opponent (luminance, red-green, blue-yellow) rotation.
_OPPONENT = torch.tensor(
    [
        [1 / np.sqrt(3), 1 / np.sqrt(3), 1 / np.sqrt(3)],
        [1 / np.sqrt(2), -1 / np.sqrt(2), 0.0],
        [1 / np.sqrt(6), 1 / np.sqrt(6), -2 / np.sqrt(6)],
    ],
    dtype=torch.float64,
)


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean and floored population std of a feature map.

    Tensors have shape ``(C,)`` for a single map or ``(B, C)`` for a batch.
    """

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ShapeMismatch(f"mean {tuple(self.mean.shape)} vs std {tuple(self.std.shape)}")

    @property
    def channels(self) -> int:
        return self.mean.shape[-1]


def _split_dims(x: torch.Tensor) -> tuple[int, tuple[int, ...]]:
    # (C, *spatial) with ndim <= 3, (B, C, *spatial) with ndim >= 4
    if x.ndim < 2:
        raise ShapeMismatch(f"feature map needs a channel and a spatial axis, got shape {tuple(x.shape)}")
    channel_dim = 1 if x.ndim >= 4 else 0
    return channel_dim, tuple(range(channel_dim + 1, x.ndim))


def feature_stats(x: torch.Tensor, eps: float = EPS) -> FeatureStats:
    """Per-channel spatial mean and population std (floored at ``eps``)."""
    channel_dim, spatial = _split_dims(x)
    n = int(np.prod([x.shape[d] for d in spatial]))
    if n == 0:
        raise EmptyFeatureMap(f"channels of shape {tuple(x.shape)} have no spatial elements")
    mean = x.mean(dim=spatial)
    std = x.var(dim=spatial, unbiased=False).sqrt().clamp_min(eps)
    return FeatureStats(mean, std)


def _expand(t: torch.Tensor, like: torch.Tensor, n_spatial: int) -> torch.Tensor:
    return t.reshape(t.shape + (1,) * n_spatial).to(like.dtype)


def adain(x: torch.Tensor, style_stats: FeatureStats, alpha: float = 1.0, eps: float = EPS) -> torch.Tensor:
    """Re-normalize ``x`` towards ``style_stats`` with strength ``alpha``.

    The target mean and std are linear blends of the content statistics and
    the style statistics; ``alpha=1`` is plain AdaIN.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    channel_dim, spatial = _split_dims(x)
    if style_stats.channels != x.shape[channel_dim]:
        raise ShapeMismatch(f"style stats have {style_stats.channels} channels, feature map has {x.shape[channel_dim]}")
    own = feature_stats(x, eps)
    if style_stats.mean.ndim > own.mean.ndim or (
        style_stats.mean.ndim == own.mean.ndim and style_stats.mean.shape != own.mean.shape
    ):
        raise ShapeMismatch(f"style stats {tuple(style_stats.mean.shape)} incompatible with {tuple(own.mean.shape)}")
    mu_y = style_stats.mean.to(x.dtype)
    sd_y = style_stats.std.to(x.dtype)
    mu_mix = (1.0 - alpha) * own.mean + alpha * mu_y
    sd_mix = (1.0 - alpha) * own.std + alpha * sd_y
    k = len(spatial)
    normalized = (x - _expand(own.mean, x, k)) / _expand(own.std, x, k)
    return normalized * _expand(sd_mix, x, k) + _expand(mu_mix, x, k)


def _to_opponent(images: torch.Tensor) -> torch.Tensor:
    rot = _OPPONENT.to(images.dtype)
    return torch.einsum("oc,bchw->bohw", rot, images)


def _from_opponent(images: torch.Tensor) -> torch.Tensor:
    rot = _OPPONENT.to(images.dtype)
    return torch.einsum("co,bchw->bohw", rot, images)


def stylize(
    content: torch.Tensor,
    styles: torch.Tensor | None,
    alpha: float,
    color_space: str = "rgb",
) -> torch.Tensor:
    """Restyle each content image with its paired style image.

    ``content`` and ``styles`` are ``B x C x H x W`` batches in ``[0, 1]``. The
    result is clamped back into ``[0, 1]``.
    """
    if content.ndim != 4:
        raise ShapeMismatch(f"content must be B x C x H x W, got {tuple(content.shape)}")
    if alpha == 0.0:
        return content.clone()
    if styles is None or styles.shape[0] == 0:
        raise EmptyStylePool("alpha > 0 but no style images were supplied")
    if styles.shape != content.shape:
        raise ShapeMismatch(f"styles {tuple(styles.shape)} vs content {tuple(content.shape)}")
    if color_space == "opponent":
        if content.shape[1] != 3:
            raise ShapeMismatch("opponent color space needs 3-channel images")
        out = _from_opponent(adain(_to_opponent(content), feature_stats(_to_opponent(styles)), alpha))
    elif color_space == "rgb":
        out = adain(content, feature_stats(styles), alpha)
    else:
        raise DomainError(f"unknown color space {color_space!r}")
    return out.clamp_(0.0, 1.0)


@dataclass
class StyleSource:
    """A pool of style images and the seed that drives sampling from it."""

    pool: torch.Tensor
    rng_seed: int = 0
    manifest: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.pool.shape[0])

    def digest(self) -> str:
        return hashlib.sha256(self.pool.detach().cpu().numpy().tobytes()).hexdigest()[:16]


def sample_indices(source: StyleSource, batch_size: int, draw_index: int) -> np.ndarray:
    if len(source) == 0:
        raise EmptyStylePool("style pool is empty")
    rng = np.random.default_rng([source.rng_seed, draw_index])
    return rng.integers(0, len(source), size=batch_size)


def sample_style_batch(source: StyleSource, batch_size: int, draw_index: int) -> torch.Tensor:
    """Draw ``batch_size`` style images with replacement.

    The selection depends only on ``(source.rng_seed, draw_index)``, so data
    workers can draw independently and a resumed run redraws the same styles.
    """
    idx = sample_indices(source, batch_size, draw_index)
    return source.pool[torch.from_numpy(idx)]


def load_style_dir(path: str | Path, size: int, seed: int = 0, suffixes: Sequence[str] = (".png", ".jpg", ".jpeg")) -> StyleSource:
    """Load every image under ``path`` (sorted by name), resized to ``size``."""
    from PIL import Image

    files = sorted(p for p in Path(path).rglob("*") if p.suffix.lower() in suffixes)
    if not files:
        raise EmptyStylePool(f"no style images under {path}")
    images = []
    for f in files:
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
        images.append(arr.transpose(2, 0, 1))
    pool = torch.from_numpy(np.stack(images))
    return StyleSource(pool, seed, [str(f.relative_to(path)) for f in files])
