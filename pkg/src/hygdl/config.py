"""Run configuration: one YAML file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .backbone import EncoderConfig
from .curriculum import Ablations, CurriculumConfig
from .decoder import DecoderConfig
from .errors import ConfigParseError, MissingInput
from .trainer import OptimConfig, Seeds, TrainConfig

CONFIG_VERSION = 1

# stage boundaries of the reference 1000-epoch schedule
REFERENCE_STAGES = (10, 100, 1000)


@dataclass
class DataSection:
    source: str = "synthetic"
    image_dir: Optional[str] = None
    seed: int = 0
    n_per_class: int = 200
    n_classes: int = 10
    n_test_per_class: int = 40
    img_size: int = 32
    texture_correlation: float = 0.95


@dataclass
class StyleSection:
    source: str = "synthetic"
    dir: Optional[str] = None
    seed: int = 7
    n: int = 512


@dataclass
class EncoderSection:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0


@dataclass
class DecoderSection:
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    style_dim: int = 32


@dataclass
class ModelSection:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)


@dataclass
class CurriculumSection:
    stage1_end: Optional[int] = None
    stage2_end: Optional[int] = None
    alpha_max: float = 0.5
    lambda_align_max: float = 0.15
    lambda_cross_value: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    mask_ratio: float = 0.75
    base_lr: float = 1.5e-3
    lr_batch_ref: int = 256
    weight_decay: float = 0.05
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    warmup_epochs: int = 2
    min_lr: float = 0.0
    ema_momentum: float = 0.996
    ema_final: float = 1.0
    color_space: str = "rgb"
    crop_scale: list = field(default_factory=lambda: [0.6, 1.0])
    dtype: str = "float32"
    checkpoint_every: int = 200
    threads: int = 1


@dataclass
class DisentangleSection:
    mode: str = "svd-batch"
    k: int = 2


@dataclass
class AblationSection:
    no_distill: bool = False
    no_recon: bool = False
    no_cross_recon: bool = False
    stop_cross_gradient: bool = False


@dataclass
class SeedSection:
    model: int = 0
    mask: int = 1
    style: int = 2
    augment: int = 3
    data: int = 4


@dataclass
class ProbeSection:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 256
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class DiagnoseSection:
    table: Optional[str] = None
    metric: str = "top1"


@dataclass
class PlotSection:
    table: Optional[str] = None
    checkpoint: Optional[str] = None
    n_images: int = 8


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    styles: StyleSection = field(default_factory=StyleSection)
    model: ModelSection = field(default_factory=ModelSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    train: TrainSection = field(default_factory=TrainSection)
    disentangle: DisentangleSection = field(default_factory=DisentangleSection)
    ablations: AblationSection = field(default_factory=AblationSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    plot: PlotSection = field(default_factory=PlotSection)

    def resolved(self) -> "RunConfig":
        """Copy with curriculum stage boundaries filled in explicitly."""
        out = dataclasses.replace(self, curriculum=dataclasses.replace(self.curriculum))
        s1, s2, total = REFERENCE_STAGES
        n = self.train.epochs
        if out.curriculum.stage1_end is None:
            out.curriculum.stage1_end = int(round(s1 * n / total))
        if out.curriculum.stage2_end is None:
            out.curriculum.stage2_end = max(out.curriculum.stage1_end, int(round(s2 * n / total)))
        return out

    def train_config(self) -> TrainConfig:
        r = self.resolved()
        c, t = r.curriculum, r.train
        return TrainConfig(
            encoder=EncoderConfig(img_size=r.data.img_size, in_chans=3, **dataclasses.asdict(r.model.encoder)),
            decoder=DecoderConfig(**dataclasses.asdict(r.model.decoder)),
            curriculum=CurriculumConfig(c.stage1_end, c.stage2_end, t.epochs, c.alpha_max,
                                        c.lambda_align_max, c.lambda_cross_value),
            ablations=Ablations(**dataclasses.asdict(r.ablations)),
            optim=OptimConfig(t.base_lr, t.lr_batch_ref, t.weight_decay, tuple(t.betas), t.warmup_epochs, t.min_lr),
            seeds=Seeds(**dataclasses.asdict(r.seeds)),
            epochs=t.epochs,
            batch_size=t.batch_size,
            mask_ratio=t.mask_ratio,
            decomposition_mode=r.disentangle.mode,
            k=r.disentangle.k,
            ema_momentum=t.ema_momentum,
            ema_final=t.ema_final,
            color_space=t.color_space,
            crop_scale=tuple(t.crop_scale),
            dtype=t.dtype,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _lines(node: yaml.Node, path: str = "") -> dict[str, int]:
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = f"{path}.{k.value}" if path else str(k.value)
            out[p] = k.start_mark.line + 1
            out.update(_lines(v, p))
    return out


def _build(cls, data: Any, path: str, lines: dict[str, int]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigParseError(f"expected a mapping for section {path or '<root>'}", field=path or None,
                               line=lines.get(path))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        p = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigParseError(f"unknown key {key!r}", field=p, line=lines.get(p))
        default = cls()
        current = getattr(default, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, p, lines)
            continue
        kwargs[key] = _coerce(value, current, fields[key], p, lines)
    return cls(**kwargs)


def _coerce(value, default, f: dataclasses.Field, path: str, lines: dict[str, int]):
    line = lines.get(path)
    hint = str(f.type)
    if value is None:
        if "Optional" in hint or default is None:
            return None
        raise ConfigParseError("null is not allowed here", field=path, line=line)
    if isinstance(default, bool) or hint == "bool":
        if not isinstance(value, bool):
            raise ConfigParseError(f"expected true/false, got {value!r}", field=path, line=line)
        return value
    if isinstance(default, int) or hint in ("int", "Optional[int]"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigParseError(f"expected an integer, got {value!r}", field=path, line=line)
        return value
    if isinstance(default, float) or hint == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigParseError(f"expected a number, got {value!r}", field=path, line=line)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigParseError(f"expected a list of {len(default)} numbers", field=path, line=line)
        return [float(v) for v in value]
    if isinstance(default, str) or "str" in hint:
        if not isinstance(value, str):
            raise ConfigParseError(f"expected a string, got {value!r}", field=path, line=line)
        return value
    return value


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigParseError(f"{source}: invalid YAML: {getattr(exc, 'problem', exc)}",
                               line=None if mark is None else mark.line + 1) from exc
    lines = _lines(node) if node is not None else {}
    cfg = _build(RunConfig, data, "", lines)
    if cfg.version != CONFIG_VERSION:
        raise ConfigParseError(f"config version {cfg.version}, expected {CONFIG_VERSION}", field="version",
                               line=lines.get("version"))
    _validate(cfg, lines)
    return cfg


def _validate(cfg: RunConfig, lines: dict[str, int]) -> None:
    def bad(msg, path):
        raise ConfigParseError(msg, field=path, line=lines.get(path))

    if cfg.data.source not in ("synthetic", "image_dir"):
        bad(f"unknown data source {cfg.data.source!r}", "data.source")
    if cfg.data.source == "image_dir" and not cfg.data.image_dir:
        bad("data.image_dir is required for an image_dir source", "data.image_dir")
    if cfg.styles.source not in ("synthetic", "dir"):
        bad(f"unknown style source {cfg.styles.source!r}", "styles.source")
    if cfg.disentangle.mode not in ("svd-batch", "k1-per-sample"):
        bad(f"unknown decomposition mode {cfg.disentangle.mode!r}", "disentangle.mode")
    if cfg.disentangle.k not in (1, 2, 4):
        bad("k must be 1, 2 or 4", "disentangle.k")
    if cfg.disentangle.mode == "k1-per-sample" and cfg.disentangle.k != 1:
        bad("k1-per-sample mode requires k = 1", "disentangle.k")
    if not 0.0 <= cfg.train.mask_ratio < 1.0:
        bad("mask_ratio must lie in [0, 1)", "train.mask_ratio")
    if cfg.train.color_space not in ("rgb", "opponent"):
        bad(f"unknown color space {cfg.train.color_space!r}", "train.color_space")
    if cfg.train.dtype not in ("float32", "float64"):
        bad("dtype must be float32 or float64", "train.dtype")
    if cfg.train.epochs < 1:
        bad("epochs must be positive", "train.epochs")
    if cfg.train.checkpoint_every < 1:
        bad("checkpoint_every must be positive", "train.checkpoint_every")
    if cfg.data.img_size % cfg.model.encoder.patch_size:
        bad("img_size must be divisible by patch_size", "model.encoder.patch_size")
    if not 0.0 <= cfg.curriculum.alpha_max <= 1.0:
        bad("alpha_max must lie in [0, 1]", "curriculum.alpha_max")
    r = cfg.resolved().curriculum
    if not 0 <= r.stage1_end <= r.stage2_end <= cfg.train.epochs:
        bad("need 0 <= stage1_end <= stage2_end <= train.epochs", "curriculum")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"config file {path} not found")
    return parse_config(path.read_text(), str(path))
