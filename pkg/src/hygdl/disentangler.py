"""Orthogonal content/style split of CLS embeddings.

Content is either a single direction per image pair (the bisector of the two
normalized embeddings) or a k-dimensional subspace shared by a batch, taken
from the SVD of the teacher/student cross-covariance. Style is whatever is
left after projecting onto that content basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import DegenerateDirection, DomainError, RankDeficient, ShapeMismatch

DIRECTION_FLOOR = 1e-6
SINGULAR_FLOOR = 1e-8
TIE_GAP = 1e-8


@dataclass
class ContentBasis:
    """Orthonormal content basis.

    ``basis`` is ``D x k`` for a batch-shared subspace or ``B x D x 1`` when
    every sample has its own direction.
    """

    basis: torch.Tensor
    k: int
    singular_values: torch.Tensor | None = None
    tie: bool = False

    @property
    def per_sample(self) -> bool:
        return self.basis.ndim == 3

    def projector(self) -> torch.Tensor:
        return self.basis @ self.basis.transpose(-1, -2)


@dataclass
class Decomposition:
    content: torch.Tensor
    style_raw: torch.Tensor


@dataclass
class StylePack:
    style_raw: torch.Tensor
    style_vector: torch.Tensor


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


def content_direction(z_s: torch.Tensor, z_t: torch.Tensor) -> ContentBasis:
    """Normalized mean of the normalized student and teacher embeddings.

    A single ``D`` vector pair gives a ``D x 1`` basis; a ``B x D`` batch gives
    one direction per row, stored as ``B x D x 1``.
    """
    if z_s.shape != z_t.shape:
        raise ShapeMismatch(f"student {tuple(z_s.shape)} vs teacher {tuple(z_t.shape)}")
    batched = z_s.ndim == 2
    zs = z_s if batched else z_s[None]
    zt = z_t if batched else z_t[None]
    if bool((zs.norm(dim=-1) == 0).any() | (zt.norm(dim=-1) == 0).any()):
        raise DegenerateDirection("zero embedding has no direction")
    mid = (_unit(zs) + _unit(zt)) / 2
    # the norm test is on the sum, i.e. twice the midpoint
    if bool((2 * mid.norm(dim=-1) < DIRECTION_FLOOR).any()):
        raise DegenerateDirection("student and teacher embeddings are antipodal")
    v = _unit(mid)
    basis = v[:, :, None] if batched else v[0][:, None]
    return ContentBasis(basis, 1)


class _TopKProjector(torch.autograd.Function):
    """Projector onto the top-k left singular subspace of a square matrix.

    The backward only involves gaps between the kept and the discarded
    singular values, so repeated zeros in the discarded block are harmless.
    """

    @staticmethod
    def forward(ctx, sigma, u, s, k):
        uk = u[:, :k]
        ctx.save_for_backward(sigma, u, s)
        ctx.k = k
        return uk @ uk.T

    @staticmethod
    def backward(ctx, grad_p):
        sigma, u, s = ctx.saved_tensors
        k = ctx.k
        lam = s.pow(2)
        uk, ur = u[:, :k], u[:, k:]
        gs = (grad_p + grad_p.T) / 2
        gap = lam[:k][None, :] - lam[k:][:, None]
        gap = torch.where(gap.abs() < 1e-30, torch.full_like(gap, 1e-30), gap)
        kmat = 2 * (ur.T @ gs @ uk) / gap
        g_m = ur @ kmat @ uk.T
        g_m = (g_m + g_m.T) / 2
        return 2 * g_m @ sigma, None, None, None


def _fix_signs(u: torch.Tensor) -> torch.Tensor:
    idx = u.abs().argmax(dim=0)
    signs = torch.sign(u[idx, torch.arange(u.shape[1])])
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    return u * signs


def content_subspace(f_a: torch.Tensor, f_b: torch.Tensor, k: int) -> ContentBasis:
    """Top-k left singular vectors of ``f_a.T @ f_b / B``.

    Columns are sign-fixed so their largest-magnitude entry is positive. When
    the inputs carry gradient the returned basis does too: it equals
    ``P @ U_k`` where ``P`` is the differentiable subspace projector, which has
    the same value as ``U_k`` and the correct first-order behaviour of
    ``basis @ basis.T``.
    """
    if f_a.shape != f_b.shape or f_a.ndim != 2:
        raise ShapeMismatch(f"expected two B x D matrices, got {tuple(f_a.shape)} and {tuple(f_b.shape)}")
    b, d = f_a.shape
    if not 1 <= k <= min(b, d):
        raise DomainError(f"k={k} must lie in [1, min(B, D)] = [1, {min(b, d)}]")
    sigma = f_a.T @ f_b / b
    work = sigma.detach().double()
    u, s, _ = torch.linalg.svd(work)
    if s[k - 1] < SINGULAR_FLOOR:
        raise RankDeficient(f"singular value {k} is {float(s[k - 1]):.3e}")
    u = _fix_signs(u)
    tie = bool(((s[:-1] - s[1:])[: min(k, d - 1)] < TIE_GAP).any())
    uk = u[:, :k].to(f_a.dtype)
    if sigma.requires_grad:
        proj = _TopKProjector.apply(sigma, u.to(sigma.dtype), s.to(sigma.dtype), k)
        uk = proj @ uk
    return ContentBasis(uk, k, s[:k].to(f_a.dtype), tie)


def decompose(z: torch.Tensor, basis: ContentBasis) -> Decomposition:
    """Split ``z`` into its projection on the content basis and the residual."""
    v = basis.basis
    if z.shape[-1] != v.shape[-2]:
        raise ShapeMismatch(f"embedding width {z.shape[-1]} vs basis dimension {v.shape[-2]}")
    if basis.per_sample:
        if z.ndim != 2 or z.shape[0] != v.shape[0]:
            raise ShapeMismatch(f"per-sample basis for {v.shape[0]} rows, got z {tuple(z.shape)}")
        coeff = torch.einsum("bdk,bd->bk", v, z)
        content = torch.einsum("bdk,bk->bd", v, coeff)
    else:
        content = (z @ v) @ v.T
    return Decomposition(content, z - content)


class StyleProjector(nn.Module):
    """Two-layer perceptron mapping the raw style residual to a style embedding."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * in_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, style_raw):
        if style_raw.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"style residual width {style_raw.shape[-1]}, projector expects {self.in_dim}")
        return self.net(style_raw)


def style_embed(projector: StyleProjector, style_raw: torch.Tensor) -> torch.Tensor:
    return projector(style_raw)


def style_pack(projector: StyleProjector, z: torch.Tensor, basis: ContentBasis) -> StylePack:
    parts = decompose(z, basis)
    return StylePack(parts.style_raw, projector(parts.style_raw))
