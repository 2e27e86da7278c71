"""Illumination and viewpoint prompt generators.

The illumination prompter is a learnable Laplacian pyramid: a depthwise
stride-2 blur per level (initialised to a sigma=1 Gaussian), a depthwise
transposed-conv upsampler (initialised to bilinear 2x), and one conv per band
that strides the band onto the patch grid. Pyramid borders use replicate
padding so that constant images stay constant at every level.

The viewpoint prompter is conv -> BN -> LeakyReLU, then a 3x3 deformable conv
whose offsets are predicted from the coarse map, then BN -> LeakyReLU and a
stride-``patch`` conv down to the patch grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import BatchNorm2d, Conv2d, Linear, Module, _param
from .tensor import SINGLE, Tensor

BLUR_SIZE = 5
BLUR_SIGMA = 1.0
UP_SIZE = 4


def gaussian_kernel(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def bilinear_up_kernel() -> np.ndarray:
    k = np.array([1.0, 3.0, 3.0, 1.0]) / 4.0
    return np.outer(k, k)


@dataclass
class PyramidLevels:
    gaussians: list[Tensor]
    laplacians: list[Tensor]

    @property
    def n_levels(self) -> int:
        return len(self.laplacians)


@dataclass
class PromptTokens:
    tokens: Tensor
    kind: str
    block_index: int = 0

    def __post_init__(self):
        if self.kind not in ("illu", "view"):
            raise ValueError(f"prompt kind must be 'illu' or 'view', got {self.kind!r}")


def _batched(image: Tensor) -> tuple[Tensor, bool]:
    if image.ndim == 3:
        return F.reshape(image, (1,) + image.shape), True
    if image.ndim != 4:
        raise ValueError(f"expected an image [C,H,W] or batch [N,C,H,W], got {image.shape}")
    return image, False


class PyramidLevel(Module):
    def __init__(self, channels: int, width: int, conv_kernel: int, rng: np.random.Generator, dtype=SINGLE):
        self.blur = _param(np.tile(gaussian_kernel(), (channels, 1, 1, 1)), dtype)
        self.up = _param(np.tile(bilinear_up_kernel(), (channels, 1, 1, 1)), dtype)
        self.conv = Conv2d(channels, width, conv_kernel, rng, stride=conv_kernel, dtype=dtype)
        self._channels = channels

    def down(self, g: Tensor) -> Tensor:
        return F.conv2d(F.pad2d(g, BLUR_SIZE // 2, "replicate"), self.blur, None, stride=2,
                        groups=self._channels)

    def upsample(self, g: Tensor) -> Tensor:
        # replicate pad 1 + crop 3 makes the transposed conv output exactly 2x
        return F.conv_transpose2d(F.pad2d(g, 1, "replicate"), self.up, None, stride=2, padding=3,
                                  groups=self._channels)


class IllumPrompter(Module):
    def __init__(self, channels: int = 3, n_levels: int = 3, width: int = 8, patch_size: int = 16,
                 rng: np.random.Generator | None = None, dtype=SINGLE):
        rng = rng if rng is not None else np.random.default_rng(0)
        if patch_size % (2 ** (n_levels - 1)):
            raise ValueError(f"patch size {patch_size} must be divisible by 2**(n_levels-1)")
        self.levels = [PyramidLevel(channels, width, patch_size // 2 ** i, rng, dtype) for i in range(n_levels)]
        self._n_levels = n_levels
        self._width = width
        self._patch = patch_size

    @property
    def n_levels(self) -> int:
        return self._n_levels

    @property
    def out_channels(self) -> int:
        return self._n_levels * self._width

    def build_gaussian_levels(self, image: Tensor) -> list[Tensor]:
        image, _ = _batched(image)
        h, w = image.shape[-2:]
        step = 2 ** self._n_levels
        if h % step or w % step:
            raise ValueError(f"image {h}x{w} not divisible by 2**n_levels = {step}")
        gs = [image]
        for level in self.levels:
            gs.append(level.down(gs[-1]))
        return gs

    def build_laplacian_levels(self, gaussians: list[Tensor]) -> list[Tensor]:
        if len(gaussians) != self._n_levels + 1:
            raise ValueError(f"expected {self._n_levels + 1} gaussian levels, got {len(gaussians)}")
        return [gaussians[i] - level.upsample(gaussians[i + 1]) for i, level in enumerate(self.levels)]

    def pyramid(self, image: Tensor) -> PyramidLevels:
        gs = self.build_gaussian_levels(image)
        return PyramidLevels(gs, self.build_laplacian_levels(gs))

    def __call__(self, image: Tensor) -> Tensor:
        image, single = _batched(image)
        if image.shape[-1] % self._patch or image.shape[-2] % self._patch:
            raise ValueError(f"image {image.shape[-2:]} not divisible by patch size {self._patch}")
        levels = self.pyramid(image)
        out = F.concat([lv.conv(lap) for lv, lap in zip(self.levels, levels.laplacians)], axis=1)
        return F.reshape(out, out.shape[1:]) if single else out


class ViewPrompter(Module):
    def __init__(self, channels: int = 3, width: int = 8, patch_size: int = 16,
                 rng: np.random.Generator | None = None, leaky_slope: float = 0.1,
                 deformable: bool = True, dtype=SINGLE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.coarse_conv = Conv2d(channels, width, 3, rng, padding=1, dtype=dtype)
        self.coarse_bn = BatchNorm2d(width, dtype=dtype)
        self.offset_conv = Conv2d(width, 2 * 9, 3, rng, padding=1, dtype=dtype)
        self.offset_conv.weight.data[...] = 0.0
        self.offset_conv.bias.data[...] = 0.0
        bound = 1.0 / np.sqrt(width * 9)
        self.deform_weight = _param(rng.uniform(-bound, bound, (width, width, 3, 3)), dtype)
        self.deform_bias = _param(rng.uniform(-bound, bound, width), dtype)
        self.out_bn = BatchNorm2d(width, dtype=dtype)
        self.resample = Conv2d(width, width, patch_size, rng, stride=patch_size, dtype=dtype)
        self._slope = leaky_slope
        self._patch = patch_size
        self.deformable = deformable

    @property
    def out_channels(self) -> int:
        return self.deform_weight.shape[0]

    def coarse_view(self, image: Tensor) -> Tensor:
        return F.leaky_relu(self.coarse_bn(self.coarse_conv(image)), self._slope)

    def predict_offsets(self, coarse: Tensor) -> Tensor:
        return self.offset_conv(coarse)

    def refine(self, coarse: Tensor) -> Tensor:
        if self.deformable:
            r = F.deform_conv2d(coarse, self.predict_offsets(coarse), self.deform_weight, self.deform_bias)
        else:
            r = F.conv2d(coarse, self.deform_weight, self.deform_bias, stride=1, padding=1)
        return F.leaky_relu(self.out_bn(r), self._slope)

    def __call__(self, image: Tensor) -> Tensor:
        image, single = _batched(image)
        out = self.resample(self.refine(self.coarse_view(image)))
        return F.reshape(out, out.shape[1:]) if single else out


def tokenize_prompt(prompt_map: Tensor, proj: Linear, n_tokens: int | None = None) -> Tensor:
    """Flatten a [N,C,h,w] prompt map row-major into [N, h*w, d] tokens."""
    prompt_map, single = _batched(prompt_map)
    n, c, h, w = prompt_map.shape
    if n_tokens is not None and h * w != n_tokens:
        raise ValueError(f"prompt grid {h}x{w} gives {h * w} tokens, backbone expects {n_tokens}")
    rows = F.reshape(F.transpose(prompt_map, (0, 2, 3, 1)), (n, h * w, c))
    tokens = proj(rows)
    return F.reshape(tokens, tokens.shape[1:]) if single else tokens
