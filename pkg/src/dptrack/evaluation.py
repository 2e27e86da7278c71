"""One-pass evaluation: centre error, overlap, and the three summary statistics.

Normalized precision divides the centre offset per axis by the ground-truth
width and height and counts frames whose normalized distance is at most 0.2.
Success is the mean, over IoU thresholds 0, 0.05, ..., 1, of the fraction of
frames whose IoU is strictly greater than the threshold, so a perfect
trajectory scores 20/21.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Sequence
from .geometry import BBox
from .inference import CropPredictor, as_predictor, track_sequence
from .model import Tracker

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_AT = 20.0
NORM_PRECISION_AT = 0.2


def iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    # rounding in (x + w) - x can push identical boxes a hair above 1
    return min(1.0, inter / union) if union > 0 else 0.0


def cle(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def _check_lengths(pred: list[BBox], gt: list[BBox]) -> None:
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} predictions, {len(gt)} ground-truth boxes")


def precision_curve(pred: list[BBox], gt: list[BBox], thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    """Fraction of frames with centre error <= tau, for each tau."""
    _check_lengths(pred, gt)
    errs = np.array([cle(p, g) for p, g in zip(pred, gt)])
    if errs.size == 0:
        return np.zeros(len(thresholds))
    return (errs[None, :] <= np.asarray(thresholds, dtype=np.float64)[:, None]).mean(axis=1)


def precision_at(pred: list[BBox], gt: list[BBox], tau: float = PRECISION_AT) -> float:
    return float(precision_curve(pred, gt, [tau])[0])


def normalized_errors(pred: list[BBox], gt: list[BBox]) -> np.ndarray:
    _check_lengths(pred, gt)
    out = []
    for p, g in zip(pred, gt):
        if g.w <= 0 or g.h <= 0:
            raise ValueError(f"ground-truth box {g} has zero size")
        (px, py), (gx, gy) = p.center, g.center
        out.append(math.hypot((px - gx) / g.w, (py - gy) / g.h))
    return np.array(out)


def norm_precision(pred: list[BBox], gt: list[BBox], tau: float = NORM_PRECISION_AT) -> float:
    errs = normalized_errors(pred, gt)
    return float((errs <= tau).mean()) if errs.size else 0.0


def success_curve(pred: list[BBox], gt: list[BBox], thresholds=SUCCESS_THRESHOLDS) -> np.ndarray:
    _check_lengths(pred, gt)
    ious = np.array([iou(p, g) for p, g in zip(pred, gt)])
    if ious.size == 0:
        return np.zeros(len(thresholds))
    return (ious[None, :] > np.asarray(thresholds, dtype=np.float64)[:, None]).mean(axis=1)


def success_auc(pred: list[BBox], gt: list[BBox]) -> float:
    return float(success_curve(pred, gt).mean())


@dataclass
class MetricReport:
    precision_at_20: float
    norm_precision_at_02: float
    success_auc: float
    mean_iou: float
    per_frame_cle: list[float]
    per_frame_iou: list[float]
    per_frame_norm_error: list[float]

    @property
    def n_frames(self) -> int:
        return len(self.per_frame_cle)

    @classmethod
    def from_trajectories(cls, pred: list[BBox], gt: list[BBox]) -> "MetricReport":
        _check_lengths(pred, gt)
        ious = [iou(p, g) for p, g in zip(pred, gt)]
        return cls(
            precision_at_20=precision_at(pred, gt),
            norm_precision_at_02=norm_precision(pred, gt),
            success_auc=success_auc(pred, gt),
            mean_iou=float(np.mean(ious)) if ious else 0.0,
            per_frame_cle=[cle(p, g) for p, g in zip(pred, gt)],
            per_frame_iou=ious,
            per_frame_norm_error=normalized_errors(pred, gt).tolist(),
        )

    def precision_curve(self) -> np.ndarray:
        e = np.array(self.per_frame_cle)
        return (e[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)

    def success_curve(self) -> np.ndarray:
        v = np.array(self.per_frame_iou)
        return (v[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)

    def summary(self) -> dict:
        return {"precision_at_20": self.precision_at_20, "norm_precision_at_02": self.norm_precision_at_02,
                "success_auc": self.success_auc, "mean_iou": self.mean_iou, "n_frames": self.n_frames}


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Frame-weighted pooling: every frame of every sequence counts once."""
    if not reports:
        raise ValueError("nothing to aggregate")
    cles = [v for r in reports for v in r.per_frame_cle]
    ious = [v for r in reports for v in r.per_frame_iou]
    norms = [v for r in reports for v in r.per_frame_norm_error]
    c, i, n = np.array(cles), np.array(ious), np.array(norms)
    return MetricReport(
        precision_at_20=float((c <= PRECISION_AT).mean()),
        norm_precision_at_02=float((n <= NORM_PRECISION_AT).mean()),
        success_auc=float((i[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1).mean()),
        mean_iou=float(i.mean()),
        per_frame_cle=cles,
        per_frame_iou=ious,
        per_frame_norm_error=norms,
    )


def run_ope(model: Tracker | CropPredictor, sequences: list[Sequence], use_prompts: bool = True,
            workers: int = 1) -> tuple[dict[str, MetricReport], MetricReport, dict[str, list[BBox]]]:
    """Track every sequence from its first ground-truth box without re-initialisation."""
    for seq in sequences:
        if not seq.annotations or len(seq.annotations) != len(seq.frames):
            raise ValueError(f"sequence {seq.name} lacks complete ground truth")
    predictor = as_predictor(model, use_prompts)

    def one(seq: Sequence) -> list[BBox]:
        return track_sequence(predictor, seq.frames, seq.annotations[0])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, sequences))
    else:
        preds = [one(s) for s in sequences]
    per_seq = {s.name: MetricReport.from_trajectories(p, s.annotations) for s, p in zip(sequences, preds)}
    return per_seq, aggregate(list(per_seq.values())), {s.name: p for s, p in zip(sequences, preds)}


def write_report_json(path: str | Path, per_seq: dict[str, MetricReport], agg: MetricReport,
                      per_frame: bool = True) -> None:
    def enc(r: MetricReport) -> dict:
        return asdict(r) if per_frame else r.summary()

    doc = {"aggregate": enc(agg), "sequences": {k: enc(v) for k, v in per_seq.items()}}
    Path(path).write_text(json.dumps(doc, indent=2))


def write_curves_csv(path: str | Path, per_seq: dict[str, MetricReport], agg: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "curve", "threshold", "value"])
        for name, rep in [("aggregate", agg), *per_seq.items()]:
            for t, v in zip(PRECISION_THRESHOLDS, rep.precision_curve()):
                w.writerow([name, "precision", f"{t:g}", repr(float(v))])
            for t, v in zip(SUCCESS_THRESHOLDS, rep.success_curve()):
                w.writerow([name, "success", f"{t:.2f}", repr(float(v))])
