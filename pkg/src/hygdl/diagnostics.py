"""Linear probing of frozen encoders and detection of the rise-and-fall curve.

Also holds the synthetic shortcut dataset: class is carried by shape, while a
color palette ("texture") is tied to the class in-domain and re-assigned by a
fixed derangement in the out-of-domain split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Encoder
from .errors import DegenerateLabels, ShapeMismatch, TooFewPoints
from .stylizer import StyleSource

SWEEP_HEADER = "# hygdl-probe-sweep v1"
SHAPES = ("circle", "square", "triangle", "diamond", "plus", "cross", "ring", "hbar", "vbar", "frame")


@dataclass
class ProbeResult:
    top1: float
    top5: float
    checkpoint_epoch: int = -1
    domain_tag: str = "in-domain"
    top5_degenerate: bool = False


@dataclass
class CurveAnalysis:
    peak_epoch: int
    peak_value: float
    final_value: float
    rise_and_fall: bool


# -- features and probes -----------------------------------------------------


@torch.no_grad()
def extract_features(encoder: Encoder, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Blank-mask CLS embeddings, one row per image, in input order."""
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    rows = [encoder(images[i:i + batch_size].to(dtype)).cls for i in range(0, len(images), batch_size)]
    if not rows:
        return np.zeros((0, encoder.config.embed_dim))
    return torch.cat(rows).double().numpy()


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    epochs: int = 100,
    lr: float = 0.1,
    batch_size: int = 256,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> ProbeResult:
    """Softmax regression on standardized frozen features.

    SGD with momentum 0.9 and a cosine learning-rate decay over ``epochs``
    passes; deterministic given ``seed``.
    """
    xtr = np.asarray(train_features, dtype=np.float64)
    xte = np.asarray(test_features, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if xtr.ndim != 2 or xte.ndim != 2 or xtr.shape[1] != xte.shape[1]:
        raise ShapeMismatch(f"train features {xtr.shape} vs test features {xte.shape}")
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise ShapeMismatch("features and labels differ in length")
    classes = np.unique(np.concatenate([ytr, yte]))
    n_classes = int(classes.max()) + 1
    if n_classes < 2:
        raise DegenerateLabels("need at least two classes")
    missing = sorted(set(range(n_classes)) - set(ytr.tolist()))
    if missing:
        raise DegenerateLabels(f"classes {missing} absent from the training split")

    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0) + 1e-6
    g = torch.Generator().manual_seed(seed)
    xt = torch.from_numpy((xtr - mu) / sd).float()
    yt = torch.from_numpy(ytr)
    head = torch.nn.Linear(xt.shape[1], n_classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=g)
        head.bias.zero_()
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay)
    n = len(xt)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        order = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            for group in opt.param_groups:
                group["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            loss = F.cross_entropy(head(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1

    with torch.no_grad():
        logits = head(torch.from_numpy((xte - mu) / sd).float())
    return topk_result(logits.numpy(), yte)


def topk_result(logits: np.ndarray, labels: np.ndarray, **kw) -> ProbeResult:
    n_classes = logits.shape[1]
    pred = logits.argmax(axis=1)
    top1 = float((pred == labels).mean()) if len(labels) else 0.0
    if n_classes < 5:
        return ProbeResult(top1, 1.0, top5_degenerate=True, **kw)
    top5_idx = np.argsort(-logits, axis=1, kind="stable")[:, :5]
    top5 = float((top5_idx == labels[:, None]).any(axis=1).mean()) if len(labels) else 0.0
    return ProbeResult(top1, max(top5, top1), **kw)


def analyze_curve(series: Sequence[tuple[float, float]]) -> CurveAnalysis:
    """Locate the peak of an accuracy curve and test for rise-then-fall."""
    if len(series) < 3:
        raise TooFewPoints(f"need at least 3 points, got {len(series)}")
    epochs = [e for e, _ in series]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise TooFewPoints("epochs must be strictly increasing")
    values = [v for _, v in series]
    i = int(np.argmax(values))  # first maximum on ties
    final = values[-1]
    interior = 0 < i < len(values) - 1
    return CurveAnalysis(epochs[i], values[i], final, bool(interior and final < values[i]))


# -- sweep tables ------------------------------------------------------------


def write_sweep(path: str | Path, results: Iterable[ProbeResult]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SWEEP_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "domain", "top1", "top5"])
        for r in results:
            w.writerow([r.checkpoint_epoch, r.domain_tag, f"{r.top1:.6f}", f"{r.top5:.6f}"])


def read_sweep(path: str | Path) -> list[ProbeResult]:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != SWEEP_HEADER:
            raise ShapeMismatch(f"{path}: expected header {SWEEP_HEADER!r}, found {first!r}")
        rows = list(csv.DictReader(fh))
    return [ProbeResult(float(r["top1"]), float(r["top5"]), int(r["epoch"]), r["domain"]) for r in rows]


def curves_by_domain(results: Iterable[ProbeResult], metric: str = "top1") -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = {}
    for r in results:
        out.setdefault(r.domain_tag, []).append((r.checkpoint_epoch, getattr(r, metric)))
    return {k: sorted(v) for k, v in out.items()}


# -- synthetic shortcut data ---------------------------------------------------


def _silhouette(shape: int, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    d = np.hypot(dx, dy)
    cheb = np.maximum(ax, ay)
    if shape == 0:
        return d < r
    if shape == 1:
        return cheb < 0.8 * r
    if shape == 2:
        h = 0.85 * r
        half = (dy + h) / (2 * h) * 0.95 * r
        return (ay < h) & (ax < half)
    if shape == 3:
        return ax + ay < 1.05 * r
    if shape in (4, 5):
        if shape == 5:
            dx, dy = (dx + dy) / np.sqrt(2), (dx - dy) / np.sqrt(2)
            ax, ay = np.abs(dx), np.abs(dy)
        return ((ax < 0.3 * r) & (ay < r)) | ((ay < 0.3 * r) & (ax < r))
    if shape == 6:
        return (d < r) & (d > 0.55 * r)
    if shape == 7:
        return (ax < r) & (ay < 0.4 * r)
    if shape == 8:
        return (ay < r) & (ax < 0.4 * r)
    if shape == 9:
        return (cheb < 0.9 * r) & (cheb > 0.55 * r)
    raise ValueError(f"unknown shape {shape}")


def palettes(n: int, seed: int = 12345) -> np.ndarray:
    """``n x 2 x 3`` foreground/background colors, mutually well separated."""
    rng = np.random.default_rng(seed)
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        fg, bg = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
        if np.linalg.norm(fg - bg) < 0.6:
            continue
        cand = np.stack([fg, bg])
        if all(np.linalg.norm(cand - p) > 0.45 for p in out) or tries > 10000:
            out.append(cand)
    return np.stack(out)


@dataclass
class ShortcutDataset:
    train_x: torch.Tensor
    train_y: np.ndarray
    test_x: torch.Tensor
    test_y: np.ndarray
    ood_x: torch.Tensor
    ood_y: np.ndarray
    train_texture: np.ndarray
    test_texture: np.ndarray
    ood_texture: np.ndarray
    test_silhouettes: np.ndarray
    ood_silhouettes: np.ndarray
    texture_permutation: np.ndarray


def _render(shapes, textures, rng, n_classes, img_size, pal, noise):
    n = len(shapes)
    ys, xs = np.meshgrid(np.arange(img_size) + 0.5, np.arange(img_size) + 0.5, indexing="ij")
    c0 = img_size / 2
    imgs = np.empty((n, 3, img_size, img_size), dtype=np.float32)
    sils = np.empty((n, img_size, img_size), dtype=bool)
    geo = np.stack([
        rng.uniform(-0.12, 0.12, n) * img_size,
        rng.uniform(-0.12, 0.12, n) * img_size,
        rng.uniform(0.24, 0.32, n) * img_size,
    ], axis=1)
    jitter = rng.uniform(-0.05, 0.05, (n, 2, 3))
    pixel_noise = rng.normal(0.0, noise, (n, 3, img_size, img_size))
    for i in range(n):
        cx, cy, r = c0 + geo[i, 0], c0 + geo[i, 1], geo[i, 2]
        sil = _silhouette(int(shapes[i]), xs - cx, ys - cy, r)
        fg, bg = np.clip(pal[textures[i]] + jitter[i], 0, 1)
        img = np.where(sil[None], fg[:, None, None], bg[:, None, None]) + pixel_noise[i]
        imgs[i] = np.clip(img, 0, 1)
        sils[i] = sil
    return imgs, sils, geo, jitter, pixel_noise


def make_shortcut_dataset(
    seed: int,
    n_per_class: int,
    n_classes: int = 10,
    n_test_per_class: Optional[int] = None,
    img_size: int = 32,
    texture_correlation: float = 0.95,
    noise: float = 0.03,
) -> ShortcutDataset:
    """Shape-labelled images whose palette is a class shortcut in-domain only.

    Training images take the palette of their class with probability
    ``texture_correlation`` and a random palette otherwise; in-domain test
    images follow the same rule. The OOD split redraws the in-domain test
    images with identical geometry, noise and color jitter, but with the
    palette of class ``perm[c]`` where ``perm`` is a fixed derangement.
    """
    if n_classes < 2 or n_classes > len(SHAPES):
        raise ShapeMismatch(f"n_classes must lie in [2, {len(SHAPES)}], got {n_classes}")
    n_test_per_class = n_test_per_class or max(1, n_per_class // 5)
    rng = np.random.default_rng(seed)
    pal = palettes(n_classes)
    shift = int(rng.integers(1, n_classes))
    perm = (np.arange(n_classes) + shift) % n_classes

    def labels(k):
        y = np.repeat(np.arange(n_classes), k)
        return y[rng.permutation(len(y))]

    def textures(y):
        t = y.copy()
        flip = rng.uniform(size=len(y)) > texture_correlation
        t[flip] = rng.integers(0, n_classes, int(flip.sum()))
        return t

    train_y = labels(n_per_class)
    train_t = textures(train_y)
    train_x, _, _, _, _ = _render(train_y, train_t, rng, n_classes, img_size, pal, noise)

    test_y = labels(n_test_per_class)
    test_t = textures(test_y)
    state = rng.bit_generator.state
    test_x, test_sil, _, _, _ = _render(test_y, test_t, rng, n_classes, img_size, pal, noise)
    rng.bit_generator.state = state
    ood_t = perm[test_y]
    ood_x, ood_sil, _, _, _ = _render(test_y, ood_t, rng, n_classes, img_size, pal, noise)

    return ShortcutDataset(
        torch.from_numpy(train_x), train_y, torch.from_numpy(test_x), test_y.copy(),
        torch.from_numpy(ood_x), test_y.copy(), train_t, test_t, ood_t, test_sil, ood_sil, perm,
    )


def make_style_pool(seed: int, n: int, img_size: int = 32) -> StyleSource:
    """Smooth random color textures with widely varying channel statistics."""
    rng = np.random.default_rng(seed)
    low = max(2, img_size // 8)
    base = rng.normal(size=(n, 3, low, low))
    field = F.interpolate(torch.from_numpy(base), size=(img_size, img_size), mode="bicubic", align_corners=False).numpy()
    field += 0.3 * rng.normal(size=field.shape)
    field = (field - field.mean(axis=(2, 3), keepdims=True)) / (field.std(axis=(2, 3), keepdims=True) + 1e-8)
    mean = rng.uniform(0.15, 0.85, (n, 3, 1, 1))
    std = rng.uniform(0.03, 0.3, (n, 3, 1, 1))
    pool = np.clip(mean + std * field, 0, 1).astype(np.float32)
    return StyleSource(torch.from_numpy(pool), seed, [f"synthetic-texture seed={seed} n={n} size={img_size}"])
