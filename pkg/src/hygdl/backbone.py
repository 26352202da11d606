"""Small ViT encoder with MAE-style random patch masking."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError, ShapeMismatch


@dataclass(frozen=True)
class EncoderConfig:
    img_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0

    @property
    def num_patches(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_chans

    def validate(self) -> None:
        if self.img_size % self.patch_size:
            raise ShapeMismatch(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ShapeMismatch(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")


@dataclass
class TokenState:
    """Encoder output.

    ``tokens`` holds only the visible patch tokens (all ``N`` of them for a
    blank mask). ``mask`` is ``B x N`` with True marking hidden patches, and
    ``ids_restore`` maps the shuffled visible-first order back to raster order.
    """

    tokens: torch.Tensor
    cls: torch.Tensor
    mask: torch.Tensor
    ids_restore: torch.Tensor

    def detach(self) -> "TokenState":
        return TokenState(self.tokens.detach(), self.cls.detach(), self.mask, self.ids_restore)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``B x C x H x W`` -> ``B x N x (p*p*C)``, patches in raster order."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeMismatch(f"spatial size {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def unpatchify(patches: torch.Tensor, patch_size: int, channels: int = 3) -> torch.Tensor:
    b, n, d = patches.shape
    g = math.isqrt(n)
    if g * g != n or d != patch_size * patch_size * channels:
        raise ShapeMismatch(f"cannot unpatchify {tuple(patches.shape)} with patch {patch_size}, {channels} channels")
    x = patches.reshape(b, g, g, patch_size, patch_size, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, g * patch_size, g * patch_size)


def random_mask(n_tokens: int, mask_ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Hide exactly ``round(mask_ratio * n_tokens)`` tokens chosen uniformly.

    Returns ``(mask, ids_restore)``: ``mask[i]`` is True for hidden tokens and
    ``ids_restore`` is the inverse of the visible-first shuffle.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise DomainError(f"mask ratio must lie in [0, 1], got {mask_ratio}")
    n_masked = int(round(mask_ratio * n_tokens))
    rng = np.random.default_rng(seed)
    ids_shuffle = rng.permutation(n_tokens)
    ids_restore = np.argsort(ids_shuffle, kind="stable")
    mask = np.zeros(n_tokens, dtype=bool)
    mask[ids_shuffle[n_tokens - n_masked:]] = True
    return mask, ids_restore


def batch_mask(batch_size: int, n_tokens: int, mask_ratio: float, seed) -> tuple[torch.Tensor, torch.Tensor]:
    """Independent random masks for a batch; row ``i`` uses seed ``(*seed, i)``."""
    base = list(np.atleast_1d(seed).tolist())
    pairs = [random_mask(n_tokens, mask_ratio, base + [i]) for i in range(batch_size)]
    mask = torch.from_numpy(np.stack([m for m, _ in pairs]))
    ids_restore = torch.from_numpy(np.stack([r for _, r in pairs]))
    return mask, ids_restore


def sincos_pos_embed(embed_dim: int, grid: int, cls_token: bool = True) -> torch.Tensor:
    """Fixed 2-D sine-cosine position table, ``(1 + grid**2) x embed_dim`` with a zero CLS row."""
    if embed_dim % 4:
        raise ShapeMismatch("embed_dim must be divisible by 4 for 2-D sincos embeddings")
    quarter = embed_dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def one(pos):
        out = np.einsum("m,d->md", pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([one(xs), one(ys)], axis=1)
    if cls_token:
        table = np.concatenate([np.zeros((1, embed_dim)), table], axis=0)
    return torch.from_numpy(table).float()


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    """The encoder weights. Student and teacher are two instances of this class."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim, config.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        grid = config.img_size // config.patch_size
        self.register_buffer("pos_embed", sincos_pos_embed(config.embed_dim, grid).unsqueeze(0), persistent=False)
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        init_weights(self)
        nn.init.normal_(self.cls_token, std=0.02)

    def forward(self, images: torch.Tensor, mask: Optional[torch.Tensor] = None,
                ids_restore: Optional[torch.Tensor] = None) -> TokenState:
        cfg = self.config
        if images.shape[1:] != (cfg.in_chans, cfg.img_size, cfg.img_size):
            raise ShapeMismatch(f"expected B x {cfg.in_chans} x {cfg.img_size} x {cfg.img_size}, got {tuple(images.shape)}")
        B, N = images.shape[0], cfg.num_patches
        pos = self.pos_embed.to(images.dtype)
        x = self.patch_embed(patchify(images, cfg.patch_size)) + pos[:, 1:]
        if mask is None:
            mask = torch.zeros(B, N, dtype=torch.bool)
            ids_restore = torch.arange(N).expand(B, N)
        else:
            if mask.shape != (B, N):
                raise ShapeMismatch(f"mask shape {tuple(mask.shape)} does not match {B} x {N} tokens")
            n_visible = int((~mask[0]).sum())
            if bool(((~mask).sum(dim=1) != n_visible).any()):
                raise ShapeMismatch("every sample must hide the same number of tokens")
            if ids_restore is None:
                # visible tokens first, each group in raster order
                ids_shuffle = torch.argsort(mask.to(torch.int8), dim=1, stable=True)
                ids_restore = torch.argsort(ids_shuffle, dim=1)
            ids_shuffle = torch.argsort(ids_restore, dim=1)
            keep = ids_shuffle[:, :n_visible]
            x = torch.gather(x, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        cls = (self.cls_token + pos[:, :1]).expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return TokenState(tokens=x[:, 1:], cls=x[:, 0], mask=mask, ids_restore=ids_restore)


def encode(weights: Encoder, images: torch.Tensor, mask: Optional[torch.Tensor] = None,
           ids_restore: Optional[torch.Tensor] = None) -> TokenState:
    """Run the encoder; ``mask=None`` is the blank-mask pass."""
    return weights(images, mask, ids_restore)


def config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
