"""Hybrid generative-discriminative self-supervised pretraining at desk scale."""

from .backbone import Encoder, EncoderConfig, TokenState, encode, patchify, random_mask, unpatchify
from .curriculum import Ablations, CurriculumConfig, CurriculumWeights, schedule, total_loss
from .decoder import Decoder, DecoderConfig, ReconTarget, decode_conditioned, masked_mse
from .diagnostics import (
    CurveAnalysis,
    ProbeResult,
    analyze_curve,
    extract_features,
    linear_probe,
    make_shortcut_dataset,
    make_style_pool,
)
from .disentangler import (
    ContentBasis,
    Decomposition,
    StylePack,
    StyleProjector,
    content_direction,
    content_subspace,
    decompose,
    style_embed,
)
from .distillation import distill_loss, ema_update
from .stylizer import FeatureStats, StyleSource, adain, feature_stats, sample_style_batch, stylize
from .trainer import StepMetrics, TrainConfig, TrainState, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"
