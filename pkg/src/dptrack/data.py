"""Synthetic dark-scene sequences, PPM image I/O and JSON-lines annotations."""
from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import BBox
from .tensor import rng_stream

SHAPES = ("square", "disc")
# channel gains of the background; they average to one so the frame mean tracks base_brightness
_BG_TINT = np.array([0.85, 1.0, 1.15])


class DataFormatError(ValueError):
    """Malformed image or annotation data."""


@dataclass
class SceneConfig:
    frame_size: int = 160
    n_frames: int = 40
    target_shape: str = "square"
    target_size: float = 24.0
    base_brightness: float = 0.15
    target_brightness: float = 0.55
    illum_jitter: float = 0.2
    view_warp: float = 0.1
    motion: float = 3.0
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.target_shape not in SHAPES:
            raise ValueError(f"target_shape must be one of {SHAPES}, got {self.target_shape!r}")
        if not 0.0 < self.base_brightness < 1.0:
            raise ValueError(f"base_brightness must lie in (0, 1), got {self.base_brightness}")
        if not 0.0 < self.target_brightness <= 1.0:
            raise ValueError(f"target_brightness must lie in (0, 1], got {self.target_brightness}")
        if self.n_frames < 1 or self.target_size <= 0:
            raise ValueError("n_frames and target_size must be positive")
        for name in ("illum_jitter", "view_warp", "motion", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.view_warp >= 0.5:
            raise ValueError(f"view_warp {self.view_warp} too large, must be < 0.5")
        lo, hi = self.center_range()
        if lo > hi:
            raise ValueError(f"target of size {self.target_size} with warp {self.view_warp} "
                             f"does not fit a {self.frame_size}px frame")

    def max_half_extent(self) -> float:
        """Upper bound on the half-width of the warped target's bounding box."""
        return self.target_size / 2.0 * math.exp(self.view_warp) * (1.0 + self.view_warp) * math.sqrt(2.0)

    def center_range(self) -> tuple[float, float]:
        m = self.max_half_extent() + 1.0
        return m, self.frame_size - m

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown scene config keys: {unknown}")
        return cls(**data)


@dataclass
class Sequence:
    frames: list[np.ndarray]
    annotations: list[BBox]
    name: str = "seq"

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise ValueError(f"{len(self.frames)} frames but {len(self.annotations)} annotations")

    def __len__(self) -> int:
        return len(self.frames)


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.frame_size
    coarse = rng.normal(size=(3, 6, 6))
    tex = np.stack([ndimage.zoom(c, n / 6.0, order=3)[:n, :n] for c in coarse])
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    return np.clip(cfg.base_brightness * _BG_TINT[:, None, None] * (1.0 + 0.3 * tex), 0.0, 1.0)


def _affine(rot: float, shear: float, scale: float) -> np.ndarray:
    c, s = math.cos(rot), math.sin(rot)
    return np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale


def _box_of(cfg: SceneConfig, center: np.ndarray, a: np.ndarray) -> BBox:
    r = cfg.target_size / 2.0
    if cfg.target_shape == "square":
        corners = np.array([[-r, -r], [r, -r], [r, r], [-r, r]]) @ a.T
        half = np.abs(corners).max(axis=0)
    else:
        half = r * np.sqrt((a ** 2).sum(axis=1))
    return BBox(float(center[0] - half[0]), float(center[1] - half[1]), float(2 * half[0]), float(2 * half[1]))


def _render_target(cfg: SceneConfig, frame: np.ndarray, color: np.ndarray, center: np.ndarray,
                   a: np.ndarray) -> None:
    n = cfg.frame_size
    pix = np.arange(n) + 0.5
    yy, xx = np.meshgrid(pix, pix, indexing="ij")
    inv = np.linalg.inv(a)
    dx, dy = xx - center[0], yy - center[1]
    u = inv[0, 0] * dx + inv[0, 1] * dy
    v = inv[1, 0] * dx + inv[1, 1] * dy
    r = cfg.target_size / 2.0
    dist = np.maximum(np.abs(u), np.abs(v)) if cfg.target_shape == "square" else np.hypot(u, v)
    cover = np.clip(r - dist + 0.5, 0.0, 1.0)      # one-pixel soft edge
    pattern = 0.8 + 0.2 * np.cos(np.pi * u / r) * np.cos(np.pi * v / r)
    frame *= 1.0 - cover
    frame += cover * pattern * color[:, None, None]


def gen_sequence(cfg: SceneConfig, name: str = "seq") -> Sequence:
    """Deterministic dark scene with one moving, warping, flickering target."""
    cfg.validate()
    rng = rng_stream(cfg.seed, 0)
    bg = _background(cfg, rng)
    color = cfg.target_brightness * rng.uniform(0.8, 1.2, size=3)
    color = np.clip(color, 0.0, 1.0)
    lo, hi = cfg.center_range()
    mid = cfg.frame_size / 2.0
    spread = (hi - lo) / 4.0
    center = np.array([mid, mid]) + rng.uniform(-spread, spread, size=2)
    velocity = np.zeros(2)
    w = cfg.view_warp
    frames, boxes = [], []
    for t in range(cfg.n_frames):
        if t > 0:
            # damped random walk; each step stays within +-motion per axis
            velocity = np.clip(0.7 * velocity + rng.uniform(-0.5, 0.5, size=2) * cfg.motion,
                               -cfg.motion, cfg.motion)
            center = center + velocity
            # reflect back into the admissible range
            center = np.where(center < lo, 2 * lo - center, center)
            center = np.where(center > hi, 2 * hi - center, center)
            center = np.clip(center, lo, hi)
        rot, shear, log_s = rng.uniform(-w, w, size=3)
        a = _affine(rot, shear, math.exp(log_s))
        frame = bg.copy()
        _render_target(cfg, frame, color, center, a)
        gain, log_gamma = rng.uniform(-cfg.illum_jitter, cfg.illum_jitter, size=2)
        frame = np.clip(frame * math.exp(gain), 0.0, 1.0) ** math.exp(log_gamma)
        if cfg.noise_sigma > 0:
            frame = frame + rng.normal(0.0, cfg.noise_sigma, size=frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        boxes.append(_box_of(cfg, center, a))
    return Sequence(frames, boxes, name)


def gen_dataset(cfg: SceneConfig, n_sequences: int) -> list[Sequence]:
    """``n_sequences`` scenes; scene ``k`` uses seed ``cfg.seed * 1000 + k``."""
    out = []
    for k in range(n_sequences):
        sub = dataclasses.replace(cfg, seed=cfg.seed * 1000 + k)
        out.append(gen_sequence(sub, name=f"seq_{k}"))
    return out


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------
_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def save_ppm(image: np.ndarray) -> bytes:
    """Encode a [3,H,W] image with values in [0,1] as binary P6 (round half up)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    q = np.floor(image.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    _, h, w = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


def load_ppm(data: bytes) -> np.ndarray:
    """Decode binary P6 bytes to a float32 [3,H,W] image in [0,1]."""
    m = _PPM_HEADER.match(data)
    if m is None:
        raise DataFormatError("malformed PPM header (expected 'P6 <width> <height> <maxval>')")
    w, h, maxval = (int(g) for g in m.groups())
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise DataFormatError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    payload = data[m.end():]
    need = w * h * 3
    if len(payload) < need:
        raise DataFormatError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(maxval))


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(save_ppm(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return load_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------
def dumps_annotations(boxes: list[BBox]) -> str:
    lines = [json.dumps({"frame": i, "x": b.x, "y": b.y, "w": b.w, "h": b.h}) for i, b in enumerate(boxes)]
    return "".join(line + "\n" for line in lines)


def loads_annotations(text: str) -> list[BBox]:
    """Parse JSON lines; frame indices must run 0, 1, 2, ... Blank lines are ignored."""
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            frame = obj["frame"]
            box = BBox(float(obj["x"]), float(obj["y"]), float(obj["w"]), float(obj["h"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"line {lineno}: malformed annotation ({exc})") from None
        if not isinstance(frame, int) or frame != len(boxes):
            raise DataFormatError(f"line {lineno}: frame index {frame!r}, expected {len(boxes)}")
        boxes.append(box)
    return boxes


def save_annotations(path: str | Path, boxes: list[BBox]) -> None:
    Path(path).write_text(dumps_annotations(boxes))


def load_annotations(path: str | Path) -> list[BBox]:
    return loads_annotations(Path(path).read_text())


# ---------------------------------------------------------------------------
# directory layout: <root>/seq_<k>/frame_<n>.ppm and <root>/seq_<k>/gt.jsonl
# ---------------------------------------------------------------------------
def write_sequence(directory: str | Path, seq: Sequence) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for n, frame in enumerate(seq.frames):
        write_ppm(d / f"frame_{n}.ppm", frame)
    save_annotations(d / "gt.jsonl", seq.annotations)


def _frame_number(p: Path) -> int:
    return int(p.stem.split("_", 1)[1])


def read_sequence(directory: str | Path, require_gt: bool = True) -> Sequence:
    d = Path(directory)
    paths = sorted((p for p in d.glob("frame_*.ppm") if p.stem[6:].isdigit()), key=_frame_number)
    if not paths:
        raise FileNotFoundError(f"no frame_<n>.ppm files in {d}")
    numbers = [_frame_number(p) for p in paths]
    if numbers != list(range(len(paths))):
        raise DataFormatError(f"{d}: frame numbers are not contiguous from 0")
    frames = [read_ppm(p) for p in paths]
    gt_path = d / "gt.jsonl"
    if gt_path.exists():
        boxes = load_annotations(gt_path)
    elif require_gt:
        raise FileNotFoundError(f"missing ground truth {gt_path}")
    else:
        boxes = [BBox(0.0, 0.0, 0.0, 0.0)] * len(frames)
    if len(boxes) != len(frames):
        raise DataFormatError(f"{d}: {len(frames)} frames but {len(boxes)} annotations")
    return Sequence(frames, boxes, d.name)


def write_dataset(root: str | Path, sequences: list[Sequence]) -> list[Path]:
    root = Path(root)
    out = []
    for k, seq in enumerate(sequences):
        d = root / f"seq_{k}"
        write_sequence(d, seq)
        out.append(d)
    return out


def sequence_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    dirs = [p for p in root.glob("seq_*") if p.is_dir() and p.name[4:].isdigit()]
    if not dirs:
        raise FileNotFoundError(f"no seq_<k> directories under {root}")
    return sorted(dirs, key=lambda p: int(p.name[4:]))


def read_dataset(root: str | Path, require_gt: bool = True) -> list[Sequence]:
    return [read_sequence(d, require_gt) for d in sequence_dirs(root)]
