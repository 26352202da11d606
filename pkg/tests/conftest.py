import numpy as np
import pytest
import torch

from hygdl.backbone import EncoderConfig
from hygdl.curriculum import CurriculumConfig
from hygdl.decoder import DecoderConfig
from hygdl.trainer import TrainConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> TrainConfig:
    """A model small enough for float64 gradient checks (< 5000 parameters)."""
    base = dict(
        encoder=EncoderConfig(img_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2, mlp_ratio=2.0),
        decoder=DecoderConfig(embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0, style_dim=4),
        curriculum=CurriculumConfig(1, 3, 5),
        epochs=5,
        batch_size=6,
        k=2,
    )
    base.update(overrides)
    return TrainConfig(**base)


def small_config(**overrides) -> TrainConfig:
    base = dict(
        encoder=EncoderConfig(img_size=16, patch_size=4, embed_dim=32, depth=2, num_heads=4),
        decoder=DecoderConfig(embed_dim=32, depth=2, num_heads=4, style_dim=16),
        curriculum=CurriculumConfig(1, 2, 4),
        epochs=4,
        batch_size=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


def gradient_check(config: TrainConfig, weights, n_params: int = 40, seed: int = 0, h: float = 1e-6):
    """Relative errors between analytic and central-difference gradients of ``l_total``.

    Parameters are sampled uniformly over every trainable scalar of the student,
    decoder and style projector.
    """
    from hygdl.trainer import TrainState, forward_losses

    state = TrainState(config, 1)
    g = torch.Generator().manual_seed(seed)
    shape = (config.batch_size, 3, config.encoder.img_size, config.encoder.img_size)
    batch = torch.rand(shape, generator=g, dtype=torch.float64)
    styles = torch.rand(shape, generator=g, dtype=torch.float64)

    def loss():
        return forward_losses(state, batch, styles, weights=weights, step=0).l_total

    params = state.trainable_parameters()
    for p in params:
        p.grad = None
    loss().backward()
    sizes = np.array([p.numel() for p in params])
    picks = np.random.default_rng(seed).choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, j = params[i], int(flat - offsets[i])
            view = p.data.view(-1)
            old = view[j].item()
            view[j] = old + h
            up = loss().item()
            view[j] = old - h
            down = loss().item()
            view[j] = old
            fd = (up - down) / (2 * h)
            a = 0.0 if p.grad is None else p.grad.view(-1)[j].item()
            errors.append(abs(a - fd) / max(abs(a), abs(fd), 1e-7))
    return errors
