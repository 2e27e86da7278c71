"""Sequence tracking: crop the template once, then follow the target frame by frame."""
from __future__ import annotations

from typing import Protocol

import numpy as np

from .geometry import BBox, CropWindow, clip_box, crop
from .model import Tracker, TrackerConfig, decode_box
from .tensor import Tensor, no_grad


class CropPredictor(Protocol):
    """Anything that maps a template crop and a search crop to a box in search-crop pixels."""

    cfg: TrackerConfig

    def predict(self, template: np.ndarray, search: np.ndarray) -> BBox: ...


class TrackerPredictor:
    def __init__(self, tracker: Tracker, use_prompts: bool = True):
        self.tracker = tracker.eval()
        self.cfg = tracker.cfg
        self.use_prompts = use_prompts
        self._dtype = tracker.head.center.conv1.weight.dtype

    def predict(self, template: np.ndarray, search: np.ndarray) -> BBox:
        with no_grad():
            head = self.tracker(Tensor(template[None].astype(self._dtype)),
                                Tensor(search[None].astype(self._dtype)), use_prompts=self.use_prompts)
        return decode_box(head, self.cfg.patch_size, self.cfg.search_size)[0]


def as_predictor(model: Tracker | CropPredictor, use_prompts: bool = True) -> CropPredictor:
    return TrackerPredictor(model, use_prompts) if isinstance(model, Tracker) else model


def track_sequence(model: Tracker | CropPredictor, frames: list[np.ndarray], init_box: BBox,
                   use_prompts: bool = True) -> list[BBox]:
    """One box per frame; the first is ``init_box`` itself."""
    if len(frames) == 0:
        raise ValueError("cannot track an empty sequence")
    predictor = as_predictor(model, use_prompts)
    cfg = predictor.cfg
    height, width = frames[0].shape[-2:]
    template = crop(frames[0], CropWindow.around(init_box, cfg.template_factor, cfg.template_size))
    boxes = [init_box]
    prev = init_box
    for frame in frames[1:]:
        window = CropWindow.around(prev, cfg.search_factor, cfg.search_size)
        local = predictor.predict(template, crop(frame, window))
        prev = clip_box(window.to_frame(local), width, height)
        boxes.append(prev)
    return boxes
