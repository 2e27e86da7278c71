"""Binary checkpoint format.

Layout (little-endian): magic ``DPTK``, u32 version, u32 tensor count, then
per tensor a u16 name length, the UTF-8 name, a u8 rank, one u32 per dim and
the float32 payload. The tracker configuration lives in a JSON sidecar next
to the checkpoint (``<path>.config.json``).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Tracker, TrackerConfig

MAGIC = b"DPTK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has too many dims")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (need {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def config_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".config.json")


def save_checkpoint(path: str | Path, tracker: Tracker) -> None:
    state = {k: v.astype(np.float32) for k, v in tracker.state_dict().items()}
    Path(path).write_bytes(encode_tensors(state))
    config_path(path).write_text(json.dumps(tracker.cfg.to_dict(), indent=2, sort_keys=True))


def load_checkpoint(path: str | Path, cfg: TrackerConfig | None = None) -> Tracker:
    """Rebuild a tracker in eval mode; the config comes from the sidecar unless given."""
    path = Path(path)
    if cfg is None:
        side = config_path(path)
        if not side.exists():
            raise FileNotFoundError(f"missing config sidecar {side}")
        cfg = TrackerConfig.from_dict(json.loads(side.read_text()))
    tracker = Tracker(cfg)
    try:
        tracker.load_state_dict(decode_tensors(path.read_bytes()))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: checkpoint does not match its config ({exc})") from None
    return tracker.eval()
