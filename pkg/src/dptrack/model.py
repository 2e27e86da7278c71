"""One-stream tracker: patch embedding, stacked DpBlocks, and an anchor-free head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .dpblock import DpBlock
from .geometry import BBox
from .nn import Conv2d, LayerNorm, Linear, Module, _param
from .prompters import IllumPrompter, PromptTokens, ViewPrompter, tokenize_prompt
from .tensor import SINGLE, Tensor, precision_dtype, rng as make_rng

SIZE_WEIGHT = 5.0
IOU_WEIGHT = 2.0
HEATMAP_SIGMA = 1.0


@dataclass
class TrackerConfig:
    search_size: int = 128
    template_size: int = 64
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    n_pyramid_levels: int = 3
    illum_width: int = 8
    view_width: int = 8
    head_hidden: int = 32
    coef_init: float = 0.1
    shared_pfi_mlp: bool = False
    lr: float = 4e-4
    weight_decay: float = 1e-4
    steps: int = 1200
    batch_size: int = 4
    decay_at: float = 0.8
    freeze_backbone: bool = False
    template_factor: float = 2.0
    search_factor: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("search_size", "template_size"):
            size = getattr(self, name)
            if size <= 0 or size % self.patch_size:
                raise ValueError(f"{name}={size} must be a positive multiple of patch_size={self.patch_size}")
            if size % (2 ** self.n_pyramid_levels):
                raise ValueError(f"{name}={size} must be divisible by 2**n_pyramid_levels")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.depth < 1 or self.steps < 0 or self.batch_size < 2:
            raise ValueError("depth must be >= 1, steps >= 0 and batch_size >= 2")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch_size

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.search_grid ** 2 + self.template_grid ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrackerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown tracker config keys: {unknown}")
        return cls(**data)


@dataclass
class HeadOutput:
    center_logits: Tensor   # [B,1,hs,ws]
    size_map: Tensor        # [B,2,hs,ws], normalised (w, h)
    offset_map: Tensor      # [B,2,hs,ws], sub-cell (x, y)

    @property
    def center_map(self) -> Tensor:
        return F.sigmoid(self.center_logits)


class Backbone(Module):
    def __init__(self, cfg: TrackerConfig, rng: np.random.Generator, dtype=SINGLE):
        d = cfg.embed_dim
        self.patch_embed = Conv2d(3, d, cfg.patch_size, rng, stride=cfg.patch_size, dtype=dtype)
        self.pos_template = _param(rng.normal(0.0, 0.02, (1, cfg.template_grid ** 2, d)), dtype)
        self.pos_search = _param(rng.normal(0.0, 0.02, (1, cfg.search_grid ** 2, d)), dtype)
        self.blocks = [DpBlock(d, cfg.heads, rng, coef_init=cfg.coef_init, shared_pfi_mlp=cfg.shared_pfi_mlp,
                               dtype=dtype) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d, dtype=dtype)
        self.illum_prompter = IllumPrompter(3, cfg.n_pyramid_levels, cfg.illum_width, cfg.patch_size, rng, dtype)
        self.view_prompter = ViewPrompter(3, cfg.view_width, cfg.patch_size, rng, dtype=dtype)
        self.illum_proj = Linear(self.illum_prompter.out_channels, d, rng, dtype=dtype)
        self.view_proj = Linear(self.view_prompter.out_channels, d, rng, dtype=dtype)
        self._cfg = cfg

    def embed(self, image: Tensor, pos: Tensor) -> Tensor:
        """Non-overlapping patch projection, flattened row-major, plus position embedding."""
        if image.shape[-1] % self._cfg.patch_size or image.shape[-2] % self._cfg.patch_size:
            raise ValueError(f"image {image.shape[-2:]} not divisible by patch size {self._cfg.patch_size}")
        x = self.patch_embed(image)
        n, d = x.shape[0], x.shape[1]
        tokens = F.reshape(F.transpose(x, (0, 2, 3, 1)), (n, -1, d))
        if tokens.shape[1] != pos.shape[1]:
            raise ValueError(f"image gives {tokens.shape[1]} tokens, position table has {pos.shape[1]}")
        return tokens + pos

    def prompts(self, template: Tensor, search: Tensor) -> tuple[PromptTokens, PromptTokens]:
        illu = F.concat([tokenize_prompt(self.illum_prompter(img), self.illum_proj) for img in (template, search)],
                        axis=1)
        view = F.concat([tokenize_prompt(self.view_prompter(img), self.view_proj) for img in (template, search)],
                        axis=1)
        return PromptTokens(illu, "illu"), PromptTokens(view, "view")

    def __call__(self, template: Tensor, search: Tensor, use_prompts: bool = True) -> Tensor:
        x = F.concat([self.embed(template, self.pos_template), self.embed(search, self.pos_search)], axis=1)
        p_illu = p_view = None
        if use_prompts:
            p_illu, p_view = self.prompts(template, search)
        for blk in self.blocks:
            x, p_illu, p_view = blk(x, p_illu, p_view)
        return self.norm(x)


class _Branch(Module):
    def __init__(self, d: int, hidden: int, out: int, rng: np.random.Generator, dtype=SINGLE):
        self.conv1 = Conv2d(d, hidden, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d(hidden, out, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(F.gelu(self.conv1(x)))


class Head(Module):
    def __init__(self, cfg: TrackerConfig, rng: np.random.Generator, dtype=SINGLE):
        d = cfg.embed_dim
        self.center = _Branch(d, cfg.head_hidden, 1, rng, dtype)
        self.size = _Branch(d, cfg.head_hidden, 2, rng, dtype)
        self.offset = _Branch(d, cfg.head_hidden, 2, rng, dtype)
        self._grid = cfg.search_grid

    def __call__(self, search_tokens: Tensor) -> HeadOutput:
        n, _, d = search_tokens.shape
        g = self._grid
        fmap = F.transpose(F.reshape(search_tokens, (n, g, g, d)), (0, 3, 1, 2))
        return HeadOutput(self.center(fmap), F.sigmoid(self.size(fmap)), self.offset(fmap))


class Tracker(Module):
    def __init__(self, cfg: TrackerConfig | None = None, dtype="single"):
        cfg = cfg or TrackerConfig()
        dt = precision_dtype(dtype)
        rng = make_rng(cfg.seed)
        self.backbone = Backbone(cfg, rng, dt)
        self.head = Head(cfg, rng, dt)
        self.cfg = cfg

    def pfi_modules(self):
        for blk in self.backbone.blocks:
            yield blk.pfi_illu
            yield blk.pfi_view

    def set_pfi_coefficients(self, value: float) -> None:
        for pfi in self.pfi_modules():
            pfi.set_coefficients(value)

    def freeze_backbone(self) -> None:
        """Leave only prompters, prompt projections and PFI units trainable."""
        bb = self.backbone
        keep = {id(t) for m in (bb.illum_prompter, bb.view_prompter, bb.illum_proj, bb.view_proj,
                                *self.pfi_modules()) for _, t in m.named_parameters()}
        for _, t in self.named_parameters():
            if id(t) not in keep:
                t.requires_grad = False

    def __call__(self, template: Tensor, search: Tensor, use_prompts: bool = True) -> HeadOutput:
        tokens = self.backbone(template, search, use_prompts=use_prompts)
        n_t = self.cfg.template_grid ** 2
        return self.head(tokens[:, n_t:])


# ---------------------------------------------------------------------------
# box coding
# ---------------------------------------------------------------------------
def encode_box(box: BBox, patch_size: int, search_size: int) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Target (row, col, offset(x, y), size(w, h)) for a box given in search-image pixels."""
    cx, cy = box.center
    grid = search_size // patch_size
    col = int(np.clip(np.floor(cx / patch_size), 0, grid - 1))
    row = int(np.clip(np.floor(cy / patch_size), 0, grid - 1))
    offset = np.array([cx / patch_size - col, cy / patch_size - row])
    size = np.array([box.w / search_size, box.h / search_size])
    return row, col, offset, size


def decode_maps(center: np.ndarray, size: np.ndarray, offset: np.ndarray, patch_size: int,
                search_size: int) -> BBox:
    """Decode one sample's maps ([1|hs|ws], [2|..], [2|..]) at the argmax cell (first max in row-major order)."""
    heat = center.reshape(center.shape[-2:])
    idx = int(np.argmax(heat))
    row, col = divmod(idx, heat.shape[1])
    cx = (col + offset[0, row, col]) * patch_size
    cy = (row + offset[1, row, col]) * patch_size
    w = size[0, row, col] * search_size
    h = size[1, row, col] * search_size
    return BBox(float(cx - w / 2), float(cy - h / 2), float(w), float(h))


def decode_box(head: HeadOutput, patch_size: int = 16, search_size: int = 128) -> list[BBox]:
    center = head.center_logits.data  # argmax of the logits equals argmax of the sigmoid map
    return [decode_maps(center[b], head.size_map.data[b], head.offset_map.data[b], patch_size, search_size)
            for b in range(center.shape[0])]


def target_heatmap(row: int, col: int, grid: int, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma ** 2))


def tracking_loss(head: HeadOutput, gts: list[BBox], patch_size: int = 16, search_size: int = 128,
                  return_parts: bool = False):
    """BCE on the centre heatmap + 5 * L1(size, offset) + 2 * (1 - IoU) at the ground-truth cell."""
    b = head.center_logits.shape[0]
    if len(gts) != b:
        raise ValueError(f"{len(gts)} ground-truth boxes for a batch of {b}")
    grid = search_size // patch_size
    rows, cols, offs, sizes, heat = [], [], [], [], []
    for gt in gts:
        cx, cy = gt.center
        if not (0 <= cx < search_size and 0 <= cy < search_size) or gt.w <= 0 or gt.h <= 0:
            raise ValueError(f"ground-truth box {gt} is outside the {search_size}px search region")
        r, c, o, s = encode_box(gt, patch_size, search_size)
        rows.append(r)
        cols.append(c)
        offs.append(o)
        sizes.append(s)
        heat.append(target_heatmap(r, c, grid)[None])
    dtype = head.center_logits.dtype
    heat = np.stack(heat).astype(dtype)
    bidx = np.arange(b)
    rows, cols = np.array(rows), np.array(cols)
    offs = np.stack(offs).astype(dtype)
    sizes = np.stack(sizes).astype(dtype)

    cls = F.bce_with_logits(head.center_logits, heat)
    pred_size = head.size_map[bidx, :, rows, cols]       # [B,2]
    pred_off = head.offset_map[bidx, :, rows, cols]      # [B,2]
    reg = F.mean(F.abs(pred_size - sizes)) + F.mean(F.abs(pred_off - offs))

    ctr = (pred_off + np.stack([cols, rows], axis=1).astype(dtype)) * float(patch_size)
    wh = pred_size * float(search_size)
    p_lo, p_hi = ctr - wh * 0.5, ctr + wh * 0.5
    g_xy = np.array([[g.x, g.y] for g in gts], dtype=dtype)
    g_wh = np.array([[g.w, g.h] for g in gts], dtype=dtype)
    inter_wh = F.maximum(F.minimum(p_hi, g_xy + g_wh) - F.maximum(p_lo, g_xy), 0.0)
    inter = inter_wh[:, 0] * inter_wh[:, 1]
    union = wh[:, 0] * wh[:, 1] + (g_wh[:, 0] * g_wh[:, 1]) - inter
    iou = inter / union
    iou_term = F.mean(1.0 - iou)

    total = cls + SIZE_WEIGHT * reg + IOU_WEIGHT * iou_term
    if return_parts:
        return total, {"cls": float(cls.data), "reg": float(reg.data), "iou": float(iou_term.data)}
    return total
