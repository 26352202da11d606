"""One HyGDL optimization step, the pretraining loop and checkpoint I/O.

Randomness (masks, style draws, teacher augmentation, data order) is derived
from ``(seed, step)`` or ``(seed, epoch)`` rather than from stateful
generators, so a checkpoint only needs the step counter to resume exactly.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Encoder, EncoderConfig, batch_mask, patchify
from .curriculum import Ablations, CurriculumConfig, CurriculumWeights, schedule, total_loss
from .decoder import Decoder, DecoderConfig, ReconTarget, masked_mse
from .disentangler import StyleProjector, content_direction, content_subspace, style_pack
from .distillation import augment_view, distill_loss, ema_update, momentum_schedule
from .errors import CorruptCheckpoint, DomainError, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .stylizer import StyleSource, sample_style_batch, stylize

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HYGDLCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1.5e-3
    lr_batch_ref: int = 256
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_epochs: int = 2
    min_lr: float = 0.0


@dataclass(frozen=True)
class Seeds:
    model: int = 0
    mask: int = 1
    style: int = 2
    augment: int = 3
    data: int = 4


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    ablations: Ablations = field(default_factory=Ablations)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: Seeds = field(default_factory=Seeds)
    epochs: int = 20
    batch_size: int = 64
    mask_ratio: float = 0.75
    decomposition_mode: str = "svd-batch"
    k: int = 2
    ema_momentum: float = 0.996
    ema_final: float = 1.0
    color_space: str = "rgb"
    crop_scale: tuple[float, float] = (0.6, 1.0)
    dtype: str = "float32"

    def validate(self) -> None:
        if self.decomposition_mode not in ("svd-batch", "k1-per-sample"):
            raise DomainError(f"unknown decomposition mode {self.decomposition_mode!r}")
        if self.decomposition_mode == "k1-per-sample" and self.k != 1:
            raise DomainError("k1-per-sample mode requires k = 1")
        if self.curriculum.total_epochs != self.epochs:
            raise DomainError(f"curriculum spans {self.curriculum.total_epochs} epochs, training runs {self.epochs}")
        if self.decoder.embed_dim > self.encoder.embed_dim:
            raise DomainError("decoder width must not exceed encoder width")


def config_to_dict(config: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))


def config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(
        encoder=EncoderConfig(**d["encoder"]),
        decoder=DecoderConfig(**d["decoder"]),
        curriculum=CurriculumConfig(**d["curriculum"]),
        ablations=Ablations(**d["ablations"]),
        optim=OptimConfig(**{**d["optim"], "betas": tuple(d["optim"]["betas"])}),
        seeds=Seeds(**d["seeds"]),
        **{k: (tuple(v) if k == "crop_scale" else v) for k, v in d.items()
           if k not in ("encoder", "decoder", "curriculum", "ablations", "optim", "seeds")},
    )


@dataclass
class StepMetrics:
    epoch: int
    step: int
    l_self: float
    l_distill: float
    l_cross: float
    l_total: float
    alpha_style: float
    lambda_align: float
    lambda_cross: float
    top_singular_values: list[float]
    singular_tie: bool
    lr: float
    momentum: float

    def as_record(self) -> dict:
        return {"kind": "step", **asdict(self)}


class TrainState:
    """Student, EMA teacher, decoder, style projector and optimizer together."""

    def __init__(self, config: TrainConfig, steps_per_epoch: int):
        config.validate()
        self.config = config
        self.steps_per_epoch = steps_per_epoch
        dtype = getattr(torch, config.dtype)
        torch.manual_seed(config.seeds.model)
        self.student = Encoder(config.encoder).to(dtype)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        enc = config.encoder
        self.decoder = Decoder(config.decoder, enc.embed_dim, enc.num_patches, enc.patch_dim).to(dtype)
        self.projector = StyleProjector(enc.embed_dim, config.decoder.style_dim).to(dtype)
        self.optimizer = torch.optim.AdamW(
            self.trainable_parameters(),
            lr=self.peak_lr,
            betas=config.optim.betas,
            weight_decay=config.optim.weight_decay,
        )
        self.epoch = 0
        self.step = 0

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [*self.student.parameters(), *self.decoder.parameters(), *self.projector.parameters()]

    @property
    def dtype(self) -> torch.dtype:
        return getattr(torch, self.config.dtype)

    @property
    def peak_lr(self) -> float:
        o = self.config.optim
        return o.base_lr * self.config.batch_size / o.lr_batch_ref

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        o = self.config.optim
        warm = o.warmup_epochs * self.steps_per_epoch
        if step < warm:
            return self.peak_lr * (step + 1) / warm
        span = max(1, self.total_steps - warm)
        progress = min(1.0, (step - warm) / span)
        return o.min_lr + (self.peak_lr - o.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def momentum_at(self, step: int) -> float:
        return momentum_schedule(step, self.total_steps, self.config.ema_momentum, self.config.ema_final)

    def weights(self) -> CurriculumWeights:
        return schedule(self.epoch, self.config.curriculum, self.config.ablations)


def _finite(name: str, value: torch.Tensor) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLoss(name, v)


@dataclass
class StepOutputs:
    """Intermediate tensors of a forward pass, kept for tests and inspection."""

    stylized: torch.Tensor
    z_s: torch.Tensor
    z_t: torch.Tensor
    mask: torch.Tensor
    l_self: torch.Tensor
    l_distill: torch.Tensor
    l_cross: torch.Tensor
    l_total: torch.Tensor
    pred_self: torch.Tensor
    pred_cross: torch.Tensor
    weights: CurriculumWeights
    singular_values: list[float]
    tie: bool


def forward_losses(state: TrainState, batch: torch.Tensor, style_batch: Optional[torch.Tensor],
                   weights: Optional[CurriculumWeights] = None, step: Optional[int] = None) -> StepOutputs:
    """Everything in a training step up to and including ``L_total``."""
    cfg = state.config
    w = weights if weights is not None else state.weights()
    step = state.step if step is None else step
    batch = batch.to(state.dtype)
    if style_batch is not None:
        style_batch = style_batch.to(state.dtype)
        if style_batch.shape != batch.shape:
            raise ShapeMismatch(f"style batch {tuple(style_batch.shape)} vs batch {tuple(batch.shape)}")

    stylized = stylize(batch, style_batch, w.alpha_style, cfg.color_space)
    z_s = state.student(stylized).cls
    with torch.no_grad():
        view = augment_view(batch, (cfg.seeds.augment, step), cfg.crop_scale)
        z_t = state.teacher(view).cls
    l_distill = distill_loss(z_s, z_t)
    _finite("l_distill", l_distill)  # before the SVD, which cannot take non-finite input

    def packs(zs):
        if cfg.decomposition_mode == "svd-batch":
            basis = content_subspace(F.normalize(z_t, dim=-1), F.normalize(zs, dim=-1), cfg.k)
        else:
            basis = content_direction(zs, z_t)
        return basis, style_pack(state.projector, z_t, basis), style_pack(state.projector, zs, basis)

    basis, pack_a, pack_a2 = packs(z_s)

    B = batch.shape[0]
    n = cfg.encoder.num_patches
    mask, ids_restore = batch_mask(B, n, cfg.mask_ratio, (cfg.seeds.mask, step))
    visible = state.student(batch, mask, ids_restore)
    p = cfg.encoder.patch_size

    pred_self = state.decoder(visible, pack_a.style_vector)
    l_self = masked_mse(pred_self, ReconTarget(patchify(batch, p), mask))

    cross_target = ReconTarget(patchify(stylized, p), mask)
    if w.lambda_cross == 0.0:
        with torch.no_grad():
            pred_cross = state.decoder(visible, pack_a2.style_vector)
    elif cfg.ablations.stop_cross_gradient:
        # encoder sees no gradient from the cross term; projector and decoder still do
        _, _, pack_cut = packs(z_s.detach())
        pred_cross = state.decoder(visible.detach(), pack_cut.style_vector)
    else:
        pred_cross = state.decoder(visible, pack_a2.style_vector)
    l_cross = masked_mse(pred_cross, cross_target)

    for name, value in (("l_self", l_self), ("l_distill", l_distill), ("l_cross", l_cross)):
        _finite(name, value)
    l_total = total_loss(l_self, l_distill, l_cross, w)
    _finite("l_total", l_total)
    sv = [] if basis.singular_values is None else [float(x) for x in basis.singular_values]
    return StepOutputs(stylized, z_s, z_t, mask, l_self, l_distill, l_cross, l_total, pred_self, pred_cross, w, sv,
                       basis.tie)


def train_step(state: TrainState, batch: torch.Tensor, style_batch: Optional[torch.Tensor]) -> tuple[TrainState, StepMetrics]:
    """Forward, backward, AdamW on student/decoder/projector, then the EMA teacher update."""
    lr = state.lr_at(state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    out = forward_losses(state, batch, style_batch)
    state.optimizer.zero_grad(set_to_none=True)
    if out.l_total.requires_grad:
        out.l_total.backward()
        state.optimizer.step()
    m = state.momentum_at(state.step)
    ema_update(state.teacher, state.student, m)
    w = out.weights
    metrics = StepMetrics(
        epoch=state.epoch,
        step=state.step,
        l_self=out.l_self.item(),
        l_distill=out.l_distill.item(),
        l_cross=out.l_cross.item(),
        l_total=out.l_total.item(),
        alpha_style=w.alpha_style,
        lambda_align=w.lambda_align,
        lambda_cross=w.lambda_cross,
        top_singular_values=out.singular_values,
        singular_tie=out.tie,
        lr=lr,
        momentum=m,
    )
    state.step += 1
    return state, metrics


# -- checkpoints -------------------------------------------------------------


def _payload(state: TrainState) -> dict:
    return {
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "decoder": state.decoder.state_dict(),
        "projector": state.projector.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
    }


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write ``MAGIC | header length | JSON header | torch payload``.

    The header records the format version, the full training config and a
    SHA-256 of the payload.
    """
    buf = io.BytesIO()
    torch.save(_payload(state), buf)
    payload = buf.getvalue()
    header = json.dumps({
        "format": "hygdl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(state.config),
        "epoch": state.epoch,
        "step": state.step,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Validated ``(header, payload)`` pair from a checkpoint file."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    n = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16:16 + n])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if header.get("format") != "hygdl-checkpoint":
        raise CorruptCheckpoint(f"{path}: unexpected format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    payload = raw[16 + n:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    return header, torch.load(io.BytesIO(payload), weights_only=False)


def load_checkpoint(path: str | Path) -> TrainState:
    header, payload = read_checkpoint(path)
    state = TrainState(config_from_dict(header["config"]), payload["steps_per_epoch"])
    for name in ("student", "teacher", "decoder", "projector"):
        getattr(state, name).load_state_dict(payload[name])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    return state


def load_encoder(path: str | Path, expected: Optional[EncoderConfig] = None, which: str = "student") -> Encoder:
    """Student (or teacher) encoder from a checkpoint, refusing foreign architectures."""
    header, payload = read_checkpoint(path)
    enc_cfg = EncoderConfig(**header["config"]["encoder"])
    if expected is not None and enc_cfg != expected:
        raise VersionMismatch(f"{path}: encoder {enc_cfg} does not match expected {expected}")
    encoder = Encoder(enc_cfg).to(getattr(torch, header["config"]["dtype"]))
    encoder.load_state_dict(payload[which])
    encoder.eval()
    return encoder


# -- the loop ----------------------------------------------------------------


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def fit(
    state: TrainState,
    images: torch.Tensor,
    styles: Optional[StyleSource],
    on_step: Optional[Callable[[StepMetrics], None]] = None,
    on_epoch: Optional[Callable[[TrainState, list[StepMetrics]], None]] = None,
    max_steps: Optional[int] = None,
) -> TrainState:
    """Train from ``state.epoch``/``state.step`` to ``config.epochs``.

    ``on_epoch`` runs after each completed epoch with ``state.epoch`` already
    advanced. ``max_steps`` stops early (mid-epoch if need be), which is how
    the resume tests cut a run in half.
    """
    cfg = state.config
    done = 0
    while state.epoch < cfg.epochs:
        batches = epoch_batches(len(images), cfg.batch_size, cfg.seeds.data, state.epoch)
        if len(batches) != state.steps_per_epoch:
            raise ShapeMismatch(f"{len(batches)} batches per epoch, state expects {state.steps_per_epoch}")
        start = state.step - state.epoch * state.steps_per_epoch
        records = []
        for idx in batches[start:]:
            if max_steps is not None and done >= max_steps:
                return state
            style_batch = sample_style_batch(styles, len(idx), state.step) if styles is not None and len(styles) else None
            _, metrics = train_step(state, images[torch.from_numpy(idx)], style_batch)
            records.append(metrics)
            if on_step is not None:
                on_step(metrics)
            done += 1
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state, records)
    return state


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    if n_images < batch_size:
        raise ShapeMismatch(f"{n_images} images cannot fill a batch of {batch_size}")
    return n_images // batch_size


def epoch_summary(epoch: int, records: list) -> dict:
    """Per-epoch means of the losses; ``records`` are StepMetrics or their dict form."""
    records = [r.as_record() if isinstance(r, StepMetrics) else r for r in records]
    keys = ("l_self", "l_distill", "l_cross", "l_total")
    out = {"kind": "epoch", "epoch": epoch, "steps": len(records)}
    for k in keys:
        out[k] = float(np.mean([r[k] for r in records])) if records else float("nan")
    if records:
        last = records[-1]
        out.update(alpha_style=last["alpha_style"], lambda_align=last["lambda_align"],
                   lambda_cross=last["lambda_cross"])
    return out


def iter_metrics(path: str | Path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
