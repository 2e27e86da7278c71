"""Prompt-feature interaction (PFI) and the transformer block that hosts two of them."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import functional as F
from .nn import Attention, LayerNorm, Mlp, Module, _param
from .prompters import PromptTokens
from .tensor import SINGLE, Tensor


@dataclass
class PfiIntermediate:
    e_sim: Tensor
    e_dif: Tensor


class PfiModule(Module):
    """Similarity/difference encoders plus four scalar mixing coefficients.

    With ``shared_mlp`` both encoders use ``mlp_sim``; the layer norms stay separate.
    """

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None, coef_init: float = 0.1,
                 shared_mlp: bool = False, dtype=SINGLE):
        hidden = hidden or d
        self.mlp_sim = Mlp(d, hidden, rng, dtype=dtype)
        self.mlp_dif = None if shared_mlp else Mlp(d, hidden, rng, dtype=dtype)
        self.ln_sim = LayerNorm(d, dtype=dtype)
        self.ln_dif = LayerNorm(d, dtype=dtype)
        self.alpha_f = _param(np.array(coef_init), dtype)
        self.beta_f = _param(np.array(coef_init), dtype)
        self.alpha_p = _param(np.array(coef_init), dtype)
        self.beta_p = _param(np.array(coef_init), dtype)

    def coefficients(self) -> list[Tensor]:
        return [self.alpha_f, self.beta_f, self.alpha_p, self.beta_p]

    def set_coefficients(self, value: float) -> None:
        for c in self.coefficients():
            c.data[...] = value

    def encode(self, features: Tensor, prompt: PromptTokens | Tensor) -> PfiIntermediate:
        p = prompt.tokens if isinstance(prompt, PromptTokens) else prompt
        if p.shape != features.shape:
            raise ValueError(f"feature stream {features.shape} and prompt stream {p.shape} differ")
        mlp_dif = self.mlp_dif if self.mlp_dif is not None else self.mlp_sim
        e_sim = self.ln_sim(self.mlp_sim(features + p))
        e_dif = self.ln_dif(mlp_dif(features - p))
        return PfiIntermediate(e_sim, e_dif)

    def adapt_features(self, features: Tensor, inter: PfiIntermediate) -> Tensor:
        return features + self.alpha_f * inter.e_sim - self.beta_f * inter.e_dif

    def evolve_prompt(self, prompt: PromptTokens, inter: PfiIntermediate) -> PromptTokens:
        tokens = prompt.tokens - self.alpha_p * inter.e_sim + self.beta_p * inter.e_dif
        return replace(prompt, tokens=tokens, block_index=prompt.block_index + 1)

    def __call__(self, features: Tensor, prompt: PromptTokens) -> tuple[Tensor, PromptTokens]:
        inter = self.encode(features, prompt)
        return self.adapt_features(features, inter), self.evolve_prompt(prompt, inter)


def pfi_encode(pfi: PfiModule, features: Tensor, prompt: PromptTokens | Tensor) -> PfiIntermediate:
    return pfi.encode(features, prompt)


def pfi_adapt_features(pfi: PfiModule, features: Tensor, inter: PfiIntermediate) -> Tensor:
    return pfi.adapt_features(features, inter)


def pfi_evolve_prompt(pfi: PfiModule, prompt: PromptTokens, inter: PfiIntermediate) -> PromptTokens:
    return pfi.evolve_prompt(prompt, inter)


class DpBlock(Module):
    """Pre-norm ViT block with an illumination PFI after attention and a viewpoint PFI after the FFN."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_ratio: int = 4, coef_init: float = 0.1,
                 shared_pfi_mlp: bool = False, dtype=SINGLE):
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.attn = Attention(d, heads, rng, dtype=dtype)
        self.pfi_illu = PfiModule(d, rng, coef_init=coef_init, shared_mlp=shared_pfi_mlp, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.ffn = Mlp(d, ffn_ratio * d, rng, dtype=dtype)
        self.pfi_view = PfiModule(d, rng, coef_init=coef_init, shared_mlp=shared_pfi_mlp, dtype=dtype)

    def __call__(self, x: Tensor, p_illu: PromptTokens | None = None, p_view: PromptTokens | None = None):
        """Run the block; with both prompt streams ``None`` it is a plain ViT block."""
        x = x + self.attn(self.ln1(x))
        if p_illu is not None:
            x, p_illu = self.pfi_illu(x, p_illu)
        x = x + self.ffn(self.ln2(x))
        if p_view is not None:
            x, p_view = self.pfi_view(x, p_view)
        return x, p_illu, p_view


def dpblock_forward(block: DpBlock, x: Tensor, p_illu: PromptTokens, p_view: PromptTokens):
    for p in (p_illu, p_view):
        if p.tokens.shape != x.shape:
            raise ValueError(f"prompt stream {p.tokens.shape} does not match features {x.shape}")
    return block(x, p_illu, p_view)
