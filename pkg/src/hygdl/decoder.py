"""Style-conditioned MAE decoder and the masked reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .backbone import Block, TokenState, init_weights, sincos_pos_embed
from .errors import EmptyMask, ShapeMismatch


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    style_dim: int = 32


@dataclass
class ReconTarget:
    patches: torch.Tensor
    mask: torch.Tensor


def token_instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize each feature channel over the token axis of ``B x N x C``."""
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class StyleInjection(nn.Module):
    """AdaIN over decoder tokens with (scale, shift) predicted from the style vector."""

    def __init__(self, style_dim: int, dim: int):
        super().__init__()
        self.affine = nn.Linear(style_dim, 2 * dim)

    def modulation(self, style_vector):
        scale, shift = self.affine(style_vector).chunk(2, dim=-1)
        return 1.0 + scale, shift

    def forward(self, x, style_vector=None, modulation=None):
        h = token_instance_norm(x)
        if modulation is None and style_vector is None:
            return h
        scale, shift = modulation if modulation is not None else self.modulation(style_vector)
        return h * scale.unsqueeze(1) + shift.unsqueeze(1)


class Decoder(nn.Module):
    def __init__(self, config: DecoderConfig, encoder_dim: int, num_patches: int, patch_dim: int):
        super().__init__()
        if config.depth < 2:
            raise ShapeMismatch("the decoder needs at least two style injection points")
        self.config = config
        self.num_patches = num_patches
        self.patch_dim = patch_dim
        self.embed = nn.Linear(encoder_dim, config.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        grid = int(round(num_patches**0.5))
        self.register_buffer("pos_embed", sincos_pos_embed(config.embed_dim, grid, cls_token=False).unsqueeze(0),
                             persistent=False)
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.inject = nn.ModuleList(StyleInjection(config.style_dim, config.embed_dim) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, patch_dim)
        init_weights(self)
        nn.init.normal_(self.mask_token, std=0.02)
        for inj in self.inject:
            nn.init.normal_(inj.affine.weight, std=0.02)
            nn.init.zeros_(inj.affine.bias)

    def forward(self, visible: TokenState, style_vector: Optional[torch.Tensor] = None,
                modulations: Optional[Sequence[tuple[torch.Tensor, torch.Tensor]]] = None) -> torch.Tensor:
        tokens, ids_restore = visible.tokens, visible.ids_restore
        B, n_vis, _ = tokens.shape
        N = self.num_patches
        if ids_restore.shape != (B, N):
            raise ShapeMismatch(f"ids_restore {tuple(ids_restore.shape)} does not cover {N} tokens")
        if style_vector is not None and style_vector.shape != (B, self.config.style_dim):
            raise ShapeMismatch(f"style vector {tuple(style_vector.shape)}, expected {B} x {self.config.style_dim}")
        if modulations is not None and len(modulations) != len(self.inject):
            raise ShapeMismatch(f"{len(modulations)} modulations for {len(self.inject)} injection points")
        x = self.embed(tokens)
        x = torch.cat([x, self.mask_token.to(x.dtype).expand(B, N - n_vis, -1)], dim=1)
        x = torch.gather(x, 1, ids_restore.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        x = x + self.pos_embed.to(x.dtype)
        for i, (blk, inj) in enumerate(zip(self.blocks, self.inject)):
            x = blk(x)
            x = inj(x, style_vector, None if modulations is None else modulations[i])
        return self.head(self.norm(x))


def decode_conditioned(weights: Decoder, visible: TokenState, style_vector: Optional[torch.Tensor],
                       modulations=None) -> torch.Tensor:
    """Per-patch pixel predictions ``B x N x (p*p*C)`` for every position."""
    return weights(visible, style_vector, modulations)


def masked_mse(pred: torch.Tensor, target: ReconTarget) -> torch.Tensor:
    """Mean over masked patches of the per-patch mean squared error."""
    if pred.shape != target.patches.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.patches.shape)}")
    if target.mask.shape != pred.shape[:2]:
        raise ShapeMismatch(f"mask {tuple(target.mask.shape)} vs patches {tuple(pred.shape[:2])}")
    m = target.mask.to(pred.dtype)
    n = m.sum()
    if n == 0:
        raise EmptyMask("no masked patches to supervise")
    per_patch = (pred - target.patches).pow(2).mean(dim=-1)
    return (per_patch * m).sum() / n
