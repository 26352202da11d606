"""Desk-scale shortcut-learning experiment: plain MAE ablation against full HyGDL.

Both variants share data, architecture, optimizer and epochs. The MAE
ablation turns off stylization, distillation and cross-reconstruction. At
evenly spaced epochs the student encoder is linear-probed on the in-domain
and OOD test splits, plus on a color-randomized set that measures how much
shape information the embedding carries.

Run ``python -m hygdl.experiments --out results/shortcut_experiment.json``.
Finished runs are stored as they complete, so an interrupted invocation picks
up where it stopped.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import EncoderConfig
from .curriculum import Ablations, CurriculumConfig
from .decoder import DecoderConfig
from .diagnostics import analyze_curve, extract_features, linear_probe, make_shortcut_dataset, make_style_pool
from .trainer import Seeds, TrainConfig, TrainState, epoch_summary, fit, steps_per_epoch

log = logging.getLogger(__name__)

VARIANTS = ("mae", "hygdl")


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    n_per_class: int = 400
    n_test_per_class: int = 100
    n_classes: int = 10
    img_size: int = 32
    texture_correlation: float = 0.95
    epochs: int = 48
    n_checkpoints: int = 8
    batch_size: int = 64
    style_pool: int = 512
    probe_epochs: int = 30
    shape_probe_per_class: int = 100
    encoder: dict = field(default_factory=lambda: asdict(EncoderConfig()))
    decoder: dict = field(default_factory=lambda: asdict(DecoderConfig()))

    def checkpoint_epochs(self) -> list[int]:
        return sorted({int(round(self.epochs * (i + 1) / self.n_checkpoints)) for i in range(self.n_checkpoints)})


def train_config(cfg: ExperimentConfig, variant: str, seed: int) -> TrainConfig:
    curriculum = CurriculumConfig().scaled(cfg.epochs)
    ablations = Ablations()
    if variant == "mae":
        curriculum = CurriculumConfig(curriculum.stage1_end, curriculum.stage2_end, cfg.epochs, 0.0,
                                      curriculum.lambda_align_max, curriculum.lambda_cross_value)
        ablations = Ablations(no_distill=True, no_cross_recon=True)
    elif variant != "hygdl":
        raise ValueError(f"unknown variant {variant!r}")
    enc = EncoderConfig(**{**cfg.encoder, "img_size": cfg.img_size})
    return TrainConfig(
        encoder=enc,
        decoder=DecoderConfig(**cfg.decoder),
        curriculum=curriculum,
        ablations=ablations,
        seeds=Seeds(*(10 * seed + i for i in range(5))),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
    )


def probe_point(encoder, data, shape_data, epochs: int) -> dict:
    f_train = extract_features(encoder, data.train_x)
    out = {}
    for tag, x, y in (("in-domain", data.test_x, data.test_y), ("ood", data.ood_x, data.ood_y)):
        out[tag] = linear_probe(f_train, data.train_y, extract_features(encoder, x), y, epochs=epochs).top1
    out["shape"] = linear_probe(extract_features(encoder, shape_data.train_x), shape_data.train_y,
                                extract_features(encoder, shape_data.test_x), shape_data.test_y, epochs=epochs).top1
    return out


def run_one(cfg: ExperimentConfig, variant: str, seed: int) -> dict:
    data = make_shortcut_dataset(seed, cfg.n_per_class, cfg.n_classes, cfg.n_test_per_class, cfg.img_size,
                                 cfg.texture_correlation)
    # color drawn independently of the label: only shape predicts the class
    shape_data = make_shortcut_dataset(1000 + seed, cfg.shape_probe_per_class, cfg.n_classes,
                                       cfg.shape_probe_per_class, cfg.img_size, texture_correlation=0.0)
    styles = make_style_pool(100 + seed, cfg.style_pool, cfg.img_size)
    tcfg = train_config(cfg, variant, seed)
    state = TrainState(tcfg, steps_per_epoch(len(data.train_x), tcfg.batch_size))
    marks = set(cfg.checkpoint_epochs())
    curve, losses = [], []
    start = time.time()

    def on_epoch(st, records):
        losses.append(epoch_summary(st.epoch - 1, records))
        if st.epoch in marks:
            st.student.eval()
            point = {"epoch": st.epoch, **probe_point(st.student, data, shape_data, cfg.probe_epochs)}
            st.student.train()
            curve.append(point)
            log.info("%s seed %d epoch %d: %s (%.0fs)", variant, seed, st.epoch,
                     {k: round(v, 4) for k, v in point.items() if k != "epoch"}, time.time() - start)

    fit(state, data.train_x, styles, on_epoch=on_epoch)
    return {"variant": variant, "seed": seed, "curve": curve, "final": curve[-1], "losses": losses,
            "seconds": round(time.time() - start, 1)}


def summarize(runs: dict[str, list[dict]]) -> dict:
    out = {}
    for variant, rs in runs.items():
        if not rs:
            continue
        verdicts = [analyze_curve([(p["epoch"], p["ood"]) for p in r["curve"]]) for r in rs]
        out[variant] = {
            "final_ood_mean": float(np.mean([r["final"]["ood"] for r in rs])),
            "final_in_domain_mean": float(np.mean([r["final"]["in-domain"] for r in rs])),
            "final_shape_mean": float(np.mean([r["final"]["shape"] for r in rs])),
            "rise_and_fall": [v.rise_and_fall for v in verdicts],
            "peak_minus_final_ood": [v.peak_value - v.final_value for v in verdicts],
        }
    return out


def run_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    out.parent.mkdir(parents=True, exist_ok=True)
    result = {"format": "hygdl-shortcut-experiment", "version": 1, "config": asdict(cfg),
              "runs": {v: [] for v in VARIANTS}}
    if out.exists():
        previous = json.loads(out.read_text())
        if previous.get("config") == json.loads(json.dumps(asdict(cfg))):
            result = previous
    for seed in cfg.seeds:
        for variant in VARIANTS:
            if any(r["seed"] == seed for r in result["runs"][variant]):
                continue
            result["runs"][variant].append(run_one(cfg, variant, seed))
            result["summary"] = summarize(result["runs"])
            out.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results/shortcut_experiment.json")
    parser.add_argument("--epochs", type=int, default=ExperimentConfig.epochs)
    parser.add_argument("--n-per-class", type=int, default=ExperimentConfig.n_per_class)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(ExperimentConfig.seeds))
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(args.threads)
    torch.use_deterministic_algorithms(True)
    cfg = ExperimentConfig(seeds=tuple(args.seeds), epochs=args.epochs, n_per_class=args.n_per_class)
    result = run_experiment(cfg, Path(args.out))
    print(json.dumps(result["summary"], indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
