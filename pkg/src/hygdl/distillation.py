"""CLS self-distillation: normalized MSE loss and the EMA teacher."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateEmbedding, DomainError, ShapeMismatch

NORM_FLOOR = 1e-8


def distill_loss(z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``||z_s/|z_s| - z_t/|z_t|||^2``, i.e. ``mean(2 - 2 cos)``.

    ``z_t`` is detached here so the teacher never receives gradient, even if
    the caller forgot to run it under ``no_grad``.
    """
    if z_s.shape != z_t.shape:
        raise ShapeMismatch(f"student {tuple(z_s.shape)} vs teacher {tuple(z_t.shape)}")
    if z_s.ndim == 1:
        z_s, z_t = z_s[None], z_t[None]
    z_t = z_t.detach()
    ns = z_s.norm(dim=-1)
    nt = z_t.norm(dim=-1)
    if bool((ns < NORM_FLOOR).any() | (nt < NORM_FLOOR).any()):
        raise DegenerateEmbedding("embedding row with norm below 1e-8")
    diff = z_s / ns[:, None] - z_t / nt[:, None]
    return diff.pow(2).sum(dim=-1).mean()


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """In place: ``p_t <- m * p_t + (1 - m) * p_s`` for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise DomainError(f"momentum must lie in [0, 1], got {momentum}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ShapeMismatch(f"teacher has {len(t_params)} tensors, student has {len(s_params)}")
    for pt, ps in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise ShapeMismatch(f"parameter shape {tuple(pt.shape)} vs {tuple(ps.shape)}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            pt.copy_(ps)
        else:
            # accumulate in float64 so the only error is one final rounding
            mixed = pt.double().mul_(momentum).add_(ps.double(), alpha=1.0 - momentum)
            pt.copy_(mixed)
    return teacher


def momentum_schedule(step: int, total_steps: int, base: float = 0.996, final: float = 1.0) -> float:
    """Cosine ramp of the EMA momentum from ``base`` to ``final``."""
    if total_steps <= 0:
        return base
    progress = min(max(step / total_steps, 0.0), 1.0)
    return final - (final - base) * (math.cos(math.pi * progress) + 1.0) / 2.0


def augment_view(images: torch.Tensor, seed, scale: tuple[float, float] = (0.6, 1.0),
                 flip_prob: float = 0.5) -> torch.Tensor:
    """Random resized crop plus horizontal flip, per image, seeded by ``seed``.

    Aspect ratio is kept square; crops are resized back with bilinear
    interpolation.
    """
    b, _, h, w = images.shape
    rng = np.random.default_rng(seed)
    out = torch.empty_like(images)
    for i in range(b):
        area = rng.uniform(*scale)
        side = max(1, int(round(math.sqrt(area) * h)))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        crop = images[i:i + 1, :, top:top + side, left:left + side]
        if side != h:
            crop = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
        if rng.uniform() < flip_prob:
            crop = crop.flip(-1)
        out[i] = crop[0]
    return out
