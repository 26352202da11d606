"""Three-stage schedule for stylization strength and loss weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DomainError, NonFiniteLoss


@dataclass(frozen=True)
class CurriculumConfig:
    stage1_end: int = 10
    stage2_end: int = 100
    total_epochs: int = 1000
    alpha_max: float = 0.5
    lambda_align_max: float = 0.15
    lambda_cross_value: float = 0.1

    def __post_init__(self):
        if not 0 <= self.stage1_end <= self.stage2_end <= self.total_epochs:
            raise DomainError(
                f"need 0 <= stage1_end <= stage2_end <= total_epochs, got "
                f"{self.stage1_end}, {self.stage2_end}, {self.total_epochs}"
            )
        if min(self.alpha_max, self.lambda_align_max, self.lambda_cross_value) < 0:
            raise DomainError("curriculum maxima must be non-negative")
        if self.alpha_max > 1:
            raise DomainError("alpha_max above 1 leaves the stylization range")

    def scaled(self, total_epochs: int) -> "CurriculumConfig":
        """Same stage proportions over a different number of epochs."""
        f = total_epochs / self.total_epochs
        s1 = int(round(self.stage1_end * f))
        s2 = max(s1, int(round(self.stage2_end * f)))
        return CurriculumConfig(s1, min(s2, total_epochs), total_epochs, self.alpha_max,
                                self.lambda_align_max, self.lambda_cross_value)


@dataclass(frozen=True)
class Ablations:
    no_distill: bool = False
    no_recon: bool = False
    no_cross_recon: bool = False
    stop_cross_gradient: bool = False


@dataclass(frozen=True)
class CurriculumWeights:
    alpha_style: float
    lambda_align: float
    lambda_cross: float
    lambda_self: float = 1.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha_style, self.lambda_align, self.lambda_cross)


def schedule(epoch: int, config: CurriculumConfig, ablations: Ablations | None = None) -> CurriculumWeights:
    if not 0 <= epoch < config.total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < config.stage1_end:
        alpha = align = cross = 0.0
    elif epoch < config.stage2_end:
        frac = (epoch - config.stage1_end) / (config.stage2_end - config.stage1_end)
        alpha = frac * config.alpha_max
        align = frac * config.lambda_align_max
        cross = 0.0
    else:
        alpha, align, cross = config.alpha_max, config.lambda_align_max, config.lambda_cross_value
    self_w = 1.0
    if ablations is not None:
        if ablations.no_distill:
            align = 0.0
        if ablations.no_cross_recon:
            cross = 0.0
        if ablations.no_recon:
            self_w = cross = 0.0
    return CurriculumWeights(alpha, align, cross, self_w)


def _check(name, value):
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise NonFiniteLoss(name, v)


def total_loss(l_self, l_distill, l_cross, w: CurriculumWeights):
    """``lambda_self * l_self + lambda_align * l_distill + lambda_cross * l_cross``.

    Works on floats or on tensors (keeping the autograd graph). A term whose
    weight is zero is left out of the sum entirely.
    """
    for name, value in (("l_self", l_self), ("l_distill", l_distill), ("l_cross", l_cross)):
        _check(name, value)
    total = 0.0
    for weight, term in ((w.lambda_self, l_self), (w.lambda_align, l_distill), (w.lambda_cross, l_cross)):
        if weight != 0.0:
            total = total + weight * term
    if isinstance(total, float) and any(isinstance(t, torch.Tensor) for t in (l_self, l_distill, l_cross)):
        ref = next(t for t in (l_self, l_distill, l_cross) if isinstance(t, torch.Tensor))
        total = torch.zeros((), dtype=ref.dtype)
    return total
