"""Seeded training loop: pair sampling, crop jitter, AdamW with a single step decay."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Sequence
from .geometry import BBox, CropWindow, crop
from .model import Tracker, TrackerConfig, tracking_loss
from .optim import AdamW, step_decay_lr
from .tensor import Tensor, rng_stream

log = logging.getLogger(__name__)

# search-crop jitter, in units of sqrt(w*h) of the target
SHIFT_JITTER = 0.75
LOG_SCALE_JITTER = 0.2
SAMPLER_STREAM = 1


@dataclass
class Batch:
    template: np.ndarray   # [B,3,T,T]
    search: np.ndarray     # [B,3,S,S]
    boxes: list[BBox]      # ground truth in search-crop pixels


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    seconds: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.rows:
                w.writerow([step, repr(loss), repr(lr)])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


def search_window(box: BBox, cfg: TrackerConfig, rng: np.random.Generator | None = None) -> CropWindow:
    """Search region around ``box``; with ``rng`` the centre and scale are jittered."""
    if rng is None:
        return CropWindow.around(box, cfg.search_factor, cfg.search_size)
    unit = math.sqrt(max(box.w * box.h, 1.0))
    side = cfg.search_factor * unit * math.exp(rng.uniform(-LOG_SCALE_JITTER, LOG_SCALE_JITTER))
    dx, dy = rng.uniform(-SHIFT_JITTER, SHIFT_JITTER, size=2) * unit
    cx, cy = box.center
    return CropWindow(cx + dx - side / 2.0, cy + dy - side / 2.0, side, cfg.search_size)


def sample_batch(sequences: list[Sequence], cfg: TrackerConfig, rng: np.random.Generator,
                 batch_size: int | None = None) -> Batch:
    """Draw (template frame, search frame) pairs uniformly from random sequences."""
    b = batch_size or cfg.batch_size
    templates, searches, boxes = [], [], []
    for _ in range(b):
        seq = sequences[int(rng.integers(len(sequences)))]
        i, j = (int(v) for v in rng.integers(len(seq), size=2))
        tw = CropWindow.around(seq.annotations[i], cfg.template_factor, cfg.template_size)
        sw = search_window(seq.annotations[j], cfg, rng)
        templates.append(crop(seq.frames[i], tw))
        searches.append(crop(seq.frames[j], sw))
        boxes.append(sw.to_crop(seq.annotations[j]))
    return Batch(np.stack(templates), np.stack(searches), boxes)


def train(cfg: TrackerConfig, sequences: list[Sequence], tracker: Tracker | None = None,
          callback: Callable[[int, float, float], None] | None = None,
          batches: Callable[[np.random.Generator], Batch] | None = None) -> tuple[Tracker, TrainLog]:
    """Train for ``cfg.steps`` steps; identical inputs give bit-identical weights and logs.

    ``batches`` replaces the default pair sampler; it receives the seeded
    sampling generator on every step.
    """
    cfg.validate()
    if batches is None and (not sequences or any(len(s) == 0 for s in sequences)):
        raise ValueError("training needs at least one non-empty sequence")
    tracker = tracker if tracker is not None else Tracker(cfg)
    if cfg.freeze_backbone:
        tracker.freeze_backbone()
    tracker.train()
    dtype = tracker.head.center.conv1.weight.dtype
    opt = AdamW(tracker.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sampler = rng_stream(cfg.seed, SAMPLER_STREAM)
    tlog = TrainLog()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = batches(sampler) if batches is not None else sample_batch(sequences, cfg, sampler)
        lr = step_decay_lr(cfg.lr, step, cfg.steps, cfg.decay_at)
        opt.lr = lr
        head = tracker(Tensor(batch.template.astype(dtype)), Tensor(batch.search.astype(dtype)))
        loss = tracking_loss(head, batch.boxes, cfg.patch_size, cfg.search_size)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.data)
        tlog.rows.append((step, value, lr))
        if callback is not None:
            callback(step, value, lr)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("step %d loss %.4f lr %.2e", step, value, lr)
    tlog.seconds = time.perf_counter() - t0
    tracker.eval()
    return tracker, tlog
