"""Whole-run drivers behind the command line: pretrain, probe sweep, diagnose, plot."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .diagnostics import (
    ProbeResult,
    ShortcutDataset,
    analyze_curve,
    curves_by_domain,
    extract_features,
    linear_probe,
    make_shortcut_dataset,
    make_style_pool,
    read_sweep,
    write_sweep,
)
from .backbone import patchify, unpatchify
from .curriculum import schedule
from .errors import MissingInput
from .stylizer import StyleSource, load_style_dir, sample_style_batch
from .trainer import (
    TrainState,
    epoch_summary,
    fit,
    forward_losses,
    load_checkpoint,
    load_encoder,
    save_checkpoint,
    steps_per_epoch,
)

log = logging.getLogger(__name__)

METRICS_HEADER = {"kind": "header", "format": "hygdl-metrics", "version": 1}
CKPT_RE = re.compile(r"epoch_(\d+)\.ckpt$")


def load_dataset(cfg: RunConfig) -> ShortcutDataset:
    d = cfg.data
    if d.source == "synthetic":
        return make_shortcut_dataset(d.seed, d.n_per_class, d.n_classes, d.n_test_per_class, d.img_size,
                                     d.texture_correlation)
    return load_image_folders(Path(d.image_dir), d.img_size)


def _read_split(root: Path, size: int, classes: list[str]) -> tuple[torch.Tensor, np.ndarray]:
    from PIL import Image

    xs, ys = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).glob("*")):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
            xs.append(arr.transpose(2, 0, 1))
            ys.append(label)
    if not xs:
        raise MissingInput(f"no images under {root}")
    return torch.from_numpy(np.stack(xs)), np.asarray(ys)


def load_image_folders(root: Path, size: int) -> ShortcutDataset:
    """``root/{train,test,ood}/<class>/<image>``; class order taken from ``train``."""
    if not (root / "train").is_dir():
        raise MissingInput(f"{root}/train not found")
    classes = sorted(p.name for p in (root / "train").iterdir() if p.is_dir())
    train_x, train_y = _read_split(root / "train", size, classes)
    test_x, test_y = _read_split(root / "test", size, classes)
    ood_x, ood_y = _read_split(root / "ood", size, classes)
    empty = np.zeros(0, dtype=np.int64)
    return ShortcutDataset(train_x, train_y, test_x, test_y, ood_x, ood_y, empty, empty, empty,
                           np.zeros((0,)), np.zeros((0,)), empty)


def load_styles(cfg: RunConfig) -> StyleSource:
    s = cfg.styles
    if s.source == "synthetic":
        pool = make_style_pool(s.seed, s.n, cfg.data.img_size)
    else:
        if not s.dir:
            raise MissingInput("styles.dir is required for a directory style source")
        pool = load_style_dir(s.dir, cfg.data.img_size, s.seed)
    pool.rng_seed = cfg.seeds.style
    return pool


def checkpoint_path(out: Path, epoch: int) -> Path:
    return out / "checkpoints" / f"epoch_{epoch:04d}.ckpt"


def list_checkpoints(out: Path) -> list[tuple[int, Path]]:
    found = []
    for p in sorted((out / "checkpoints").glob("epoch_*.ckpt")):
        m = CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return found


def _record_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def pretrain(cfg: RunConfig, resume: bool = True, max_steps: Optional[int] = None) -> TrainState:
    """Train to completion (or ``max_steps``), writing config, metrics and checkpoints.

    With ``resume`` and an existing ``last.ckpt`` the run continues from it and
    the metrics stream is cut back to the checkpointed step first.
    """
    cfg = cfg.resolved()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(cfg.train.threads)
    torch.use_deterministic_algorithms(True)

    data = load_dataset(cfg)
    styles = load_styles(cfg)
    tcfg = cfg.train_config()
    manifest = {"style_manifest": styles.manifest, "style_digest": styles.digest(), "n_train": len(data.train_x)}
    (out / "config.resolved.yaml").write_text(cfg.dump())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    last = out / "last.ckpt"
    metrics_path = out / "metrics.jsonl"
    epoch_records: list[dict] = []  # step records of the epoch in progress
    if resume and last.exists():
        state = load_checkpoint(last)
        kept = []
        if metrics_path.exists():
            for line in metrics_path.read_text().splitlines(keepends=True):
                rec = json.loads(line)
                if rec["kind"] == "header" or (rec["kind"] == "step" and rec["step"] < state.step) or (
                        rec["kind"] == "epoch" and rec["epoch"] <= state.epoch):
                    kept.append(line)
                    if rec["kind"] == "step" and rec["epoch"] == state.epoch:
                        epoch_records.append(rec)
        metrics_path.write_text("".join(kept) or _record_line(METRICS_HEADER))
        log.info("resuming from step %d (epoch %d)", state.step, state.epoch)
    else:
        state = TrainState(tcfg, steps_per_epoch(len(data.train_x), tcfg.batch_size))
        metrics_path.write_text(_record_line(METRICS_HEADER))
        save_checkpoint(state, checkpoint_path(out, 0))

    fh = open(metrics_path, "a")

    def on_step(m):
        rec = m.as_record()
        epoch_records.append(rec)
        fh.write(_record_line(rec))

    def on_epoch(st, records):
        fh.write(_record_line(epoch_summary(st.epoch - 1, epoch_records)))
        epoch_records.clear()
        fh.flush()
        if st.epoch % cfg.train.checkpoint_every == 0 or st.epoch == tcfg.epochs:
            save_checkpoint(st, checkpoint_path(out, st.epoch))
        save_checkpoint(st, last)
        log.info("epoch %d done", st.epoch)

    try:
        fit(state, data.train_x, styles, on_step=on_step, on_epoch=on_epoch, max_steps=max_steps)
    finally:
        fh.close()
    if max_steps is not None and state.epoch < tcfg.epochs:
        save_checkpoint(state, last)
    return state


def probe_sweep(cfg: RunConfig, data: Optional[ShortcutDataset] = None, skip_initial: bool = True) -> list[ProbeResult]:
    """Linear probes (in-domain and OOD test sets) for every saved checkpoint."""
    out = Path(cfg.output_dir)
    ckpts = [(e, p) for e, p in list_checkpoints(out) if not (skip_initial and e == 0)]
    if not ckpts:
        raise MissingInput(f"no checkpoints under {out / 'checkpoints'}")
    data = data if data is not None else load_dataset(cfg.resolved())
    results = []
    pc = cfg.probe
    for epoch, path in ckpts:
        enc = load_encoder(path)
        f_train = extract_features(enc, data.train_x)
        for tag, x, y in (("in-domain", data.test_x, data.test_y), ("ood", data.ood_x, data.ood_y)):
            r = linear_probe(f_train, data.train_y, extract_features(enc, x), y, epochs=pc.epochs, lr=pc.lr,
                             batch_size=pc.batch_size, weight_decay=pc.weight_decay, seed=pc.seed)
            r.checkpoint_epoch, r.domain_tag = epoch, tag
            results.append(r)
            log.info("epoch %d %s top1=%.4f top5=%.4f", epoch, tag, r.top1, r.top5)
    write_sweep(out / "probe_sweep.csv", results)
    return results


def diagnose(table: str | Path, metric: str = "top1") -> dict[str, dict]:
    results = read_sweep(table)
    report = {}
    for domain, series in curves_by_domain(results, metric).items():
        report[domain] = asdict(analyze_curve(series))
    return report


def plot_curves(table: str | Path, dest: str | Path, metric: str = "top1") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = curves_by_domain(read_sweep(table), metric)
    fig, axes = plt.subplots(1, len(curves), figsize=(4.5 * len(curves), 3.5), squeeze=False)
    for ax, (domain, series) in zip(axes[0], sorted(curves.items())):
        e, v = zip(*series)
        ax.plot(e, v, marker="o")
        peak = analyze_curve(series) if len(series) >= 3 else None
        if peak is not None:
            ax.axvline(peak.peak_epoch, ls="--", lw=0.8, color="grey")
        ax.set_title(f"{domain} linear probe")
        ax.set_xlabel("pretraining epoch")
        ax.set_ylabel(metric)
    fig.tight_layout()
    dest = Path(dest)
    fig.savefig(dest, dpi=120)
    plt.close(fig)
    return dest


@torch.no_grad()
def plot_reconstructions(checkpoint: str | Path, images: torch.Tensor, styles: StyleSource, dest: str | Path) -> Path:
    """Rows: input, stylized view, visible patches, self- and cross-reconstruction.

    Uses the curriculum weights of the checkpoint's epoch (the last epoch for a
    finished run).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    state = load_checkpoint(checkpoint)
    cfg = state.config
    w = schedule(min(state.epoch, cfg.epochs - 1), cfg.curriculum, cfg.ablations)
    out = forward_losses(state, images, sample_style_batch(styles, len(images), 0), weights=w, step=0)
    p = cfg.encoder.patch_size
    visible = patchify(images, p) * (~out.mask).unsqueeze(-1)
    rows = [images, out.stylized, unpatchify(visible, p), unpatchify(out.pred_self, p), unpatchify(out.pred_cross, p)]
    names = ["input", "stylized", "visible", "self recon", "cross recon"]
    n = len(images)
    fig, axes = plt.subplots(len(rows), n, figsize=(1.2 * n, 1.3 * len(rows)), squeeze=False)
    for r, (row, name) in enumerate(zip(rows, names)):
        for c in range(n):
            ax = axes[r][c]
            ax.imshow(row[c].clamp(0, 1).permute(1, 2, 0).float().numpy())
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(name, fontsize=7)
    fig.tight_layout()
    dest = Path(dest)
    fig.savefig(dest, dpi=120)
    plt.close(fig)
    return dest
