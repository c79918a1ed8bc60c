"""Desk-scale training of the three cascade networks on synthetic data."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cascade import (DetectorParams, extract_patch_rect, normalize_pixels, preprocess_patch, scan_stage1,
                      window_in_image)
from .modelspec import CascadeModel, Network, NetworkSpec, init_weights, reference_specs
from .nnkernel import TrainingError, predict_batch, sgd_step
from .pyramid import build_pyramid, sample_rect
from .synthetic import SampleFactory, scene_label

log = logging.getLogger(__name__)

LOG_HEADER = ("network", "epoch", "loss", "train_error", "holdout_error", "seconds")


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_pos: int = 9000
    stage1_neg: int = 11000
    holdout_pos: int = 2000
    holdout_neg: int = 2000
    selective_pos: int = 4000
    selective_neg: int = 6000
    mining_scenes: int = 150
    epochs: int = 18
    selective_epochs: int = 14
    # extra CNN1 epochs on its own false positives; off by default since
    # the holdout mirrors the base sampling distribution
    mining_epochs: int = 0
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    pool_mode: str = "max"
    mining_params: DetectorParams = field(
        default_factory=lambda: DetectorParams(min_size=24, scale_factor=1.2))


def error_rate(net: Network, x: np.ndarray, y: np.ndarray, threshold: float = 0.0) -> float:
    if len(x) == 0:
        return 0.0
    pred = np.where(predict_batch(x, net.spec, net.weights) > threshold, 1.0, -1.0)
    return float(np.mean(pred != y))


def train_network(name: str, spec: NetworkSpec, x, y, hx, hy, cfg: TrainConfig,
                  rng: np.random.Generator, epochs: int, weights=None, rows=None) -> Network:
    """Momentum SGD on MSE against ±1 targets; one log row per epoch."""
    if len(x) == 0 or not (y > 0).any() or not (y < 0).any():
        raise ValueError(f"{name}: both classes need at least one sample")
    weights = init_weights(spec, rng) if weights is None else weights
    state = None
    rows = [] if rows is None else rows
    start = len([r for r in rows if r[0] == name])
    for epoch in range(epochs):
        t0 = time.perf_counter()
        # step decay over the last third
        lr = cfg.lr * (0.3 if epoch >= 2 * epochs // 3 else 1.0)
        order = rng.permutation(len(x))
        losses = []
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            weights, loss, state = sgd_step(x[idx], y[idx], spec, weights, lr, cfg.momentum, state)
            losses.append(loss)
        with np.errstate(over="ignore"):
            net = Network(spec, weights).astype(np.float32)
        if not all(np.all(np.isfinite(w.kernels)) and np.all(np.isfinite(w.biases)) for w in net.weights):
            raise TrainingError(f"{name}: weights overflow float32 in epoch {start + epoch}")
        row = (name, start + epoch, float(np.mean(losses)), error_rate(net, x, y),
               error_rate(net, hx, hy), time.perf_counter() - t0)
        rows.append(row)
        log.info("%s epoch %d loss %.5f train %.4f holdout %.4f", *row[:5])
    return Network(spec, weights)


def mine_stage1(factory: SampleFactory, cnn1: Network, n_scenes: int, params: DetectorParams):
    """Scan synthetic scenes with CNN1 and return (false-positive windows, labelled candidates)."""
    ww, wh = factory.window
    hard = []
    found = []
    for _ in range(n_scenes):
        sc = factory.scene(n_faces=int(factory.rng.integers(0, 4)))
        levels = build_pyramid(sc.image.astype(np.float32), (ww, wh), params.min_size, params.scale_factor)
        for lvl in levels:
            norm = normalize_pixels(lvl.image)
            for c in scan_stage1(lvl, cnn1, params.t1):
                rect = window_in_image(c, lvl.scale, (ww, wh))
                label = scene_label(sc.boxes, rect)
                found.append((sc, rect, label))
                if label == -1:
                    hard.append(norm[c.y:c.y + wh, c.x:c.x + ww])
    return (np.stack(hard) if hard else np.zeros((0, wh, ww), np.float32)), found


def selective_from_found(factory: SampleFactory, found, per_rect: int = 4):
    """Selective-unit samples around real stage-1 candidates."""
    rw, rh = factory.selective_rf
    pairs = [p for sc, rect, _ in found for p in factory.selective_crops(sc, rect, per_rect)]
    if not pairs:
        return np.zeros((0, rh, rw), np.float32), np.zeros(0)
    return np.stack([p[0] for p in pairs]), np.array([float(p[1]) for p in pairs])


def train_stage1(cfg: TrainConfig, rows=None, spec: NetworkSpec | None = None):
    """CNN1 only: returns (network, holdout_x, holdout_y, factory)."""
    spec = spec or reference_specs(cfg.pool_mode)[0]
    rng = np.random.default_rng(cfg.seed)
    factory = SampleFactory(cfg.seed + 1)
    holdout = SampleFactory(cfg.seed + 10_000)
    x, y = factory.stage1(cfg.stage1_pos, cfg.stage1_neg)
    hx, hy = holdout.stage1(cfg.holdout_pos, cfg.holdout_neg)
    net = train_network("cnn1", spec, x, y, hx, hy, cfg, rng, cfg.epochs, rows=rows)
    if cfg.mining_scenes and cfg.mining_epochs:
        hard, _ = mine_stage1(factory, net.astype(np.float32), cfg.mining_scenes, cfg.mining_params)
        log.info("cnn1: mined %d hard negatives", len(hard))
        if len(hard):
            x = np.concatenate([x, hard.astype(x.dtype)])
            y = np.concatenate([y, -np.ones(len(hard))])
        net = train_network("cnn1", spec, x, y, hx, hy, cfg, rng, cfg.mining_epochs,
                            weights=net.weights, rows=rows)
    return net.astype(np.float32), hx, hy, factory


def _fit_selective(specs, stage1, selective, cfg: TrainConfig, rows, t0: float):
    cnn1, hx, hy = stage1
    x2, y2, h2x, h2y = selective
    rng = np.random.default_rng(cfg.seed + 2)
    stage1_seconds = time.perf_counter() - t0
    cnn2 = train_network("cnn2", specs[1], x2, y2, h2x, h2y, cfg, rng, cfg.selective_epochs, rows=rows)
    cnn3 = train_network("cnn3", specs[2], x2, y2, h2x, h2y, cfg, rng, cfg.selective_epochs, rows=rows)
    model = CascadeModel(cnn1.astype(np.float32), cnn2.astype(np.float32), cnn3.astype(np.float32))
    model.validate()
    summary = {
        "stage1_holdout_error": error_rate(model.cnn1, hx, hy),
        "stage1_seconds": stage1_seconds,
        "cnn2_holdout_error": error_rate(model.cnn2, h2x, h2y),
        "cnn3_holdout_error": error_rate(model.cnn3, h2x, h2y),
        "total_seconds": time.perf_counter() - t0,
    }
    return model, rows, summary


def train_cascade(cfg: TrainConfig = TrainConfig()):
    """Train CNN1 on synthetic windows, then CNN2 and CNN3 on selective-unit samples.

    Returns ``(CascadeModel, log_rows, summary)``.
    """
    rows: list[tuple] = []
    specs = reference_specs(cfg.pool_mode)
    t0 = time.perf_counter()
    cnn1, hx, hy, factory = train_stage1(cfg, rows, specs[0])
    sx, sy = factory.selective(cfg.selective_pos, cfg.selective_neg)
    _, found = mine_stage1(factory, cnn1, cfg.mining_scenes, cfg.mining_params)
    mx, my = selective_from_found(factory, found)
    x2 = np.concatenate([sx, mx]) if len(mx) else sx
    y2 = np.concatenate([sy, my]) if len(my) else sy
    hold = SampleFactory(cfg.seed + 20_000)
    h2x, h2y = hold.selective(cfg.holdout_pos // 2, cfg.holdout_neg // 2)
    return _fit_selective(specs, (cnn1, hx, hy), (x2, y2, h2x, h2y), cfg, rows, t0)


def samples_from_images(images, label: float, window=(27, 31), patch_size=(51, 55), selective_rf=(35, 39)):
    """Stage-1 and selective samples from crops that frame one object (or none) each.

    Each image is treated as a stage-1 window: it is resampled to the window
    for CNN1, and read through the selective unit's patch extraction with its
    centre receptive-field crop kept for CNN2/CNN3.
    """
    pw, ph = patch_size
    rw, rh = selective_rf
    ox, oy = (pw - rw) // 2, (ph - rh) // 2
    expand = (pw / rw, ph / rh)
    s1, s2 = [], []
    for img in images:
        plane = np.asarray(img, np.float32)
        rect = (0.0, 0.0, float(plane.shape[1]), float(plane.shape[0]))
        s1.append(normalize_pixels(sample_rect(plane, rect, *window)))
        patch = preprocess_patch(extract_patch_rect(plane, rect, patch_size, expand))
        s2.append(patch[oy:oy + rh, ox:ox + rw])
    n = len(s1)
    return (np.stack(s1) if n else np.zeros((0, window[1], window[0]), np.float32),
            np.stack(s2) if n else np.zeros((0, rh, rw), np.float32),
            np.full(n, label))


def train_from_samples(positives, negatives, cfg: TrainConfig = TrainConfig(), holdout_fraction: float = 0.2):
    """Train all three networks on user-supplied positive and negative crops."""
    if not len(positives) or not len(negatives):
        raise ValueError("both positive and negative samples are required")
    p1, p2, py = samples_from_images(positives, 1.0)
    n1, n2, ny = samples_from_images(negatives, -1.0)
    x1, x2, y = np.concatenate([p1, n1]), np.concatenate([p2, n2]), np.concatenate([py, ny])
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(y))
    n_hold = int(round(len(y) * holdout_fraction)) if len(y) > 4 else 0
    hold, train = order[:n_hold], order[n_hold:]
    rows: list[tuple] = []
    specs = reference_specs(cfg.pool_mode)
    t0 = time.perf_counter()
    cnn1 = train_network("cnn1", specs[0], x1[train], y[train], x1[hold], y[hold], cfg, rng, cfg.epochs,
                         rows=rows)
    return _fit_selective(specs, (cnn1.astype(np.float32), x1[hold], y[hold]),
                          (x2[train], y[train], x2[hold], y[hold]), cfg, rows, t0)
