from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float | list[float] = 0.0) -> AdamState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place.

    ``weight_decay`` may be a per-parameter list. Parameters whose gradient is
    ``None`` are skipped.
    """
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p) for p in params]
        state.exp_avg_sq = [np.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer state have different lengths")
    decays = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v, wd in zip(params, grads, state.exp_avg, state.exp_avg_sq, decays):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if wd:
            p *= 1.0 - lr * wd
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return state


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a fixed list of tensors.

    Weight decay is only applied to tensors with two or more dims; biases,
    norm affines and the scalar interaction coefficients are not decayed.
    """

    def __init__(self, params: list[Tensor], lr: float = 4e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.decays = [weight_decay if p.ndim >= 2 else 0.0 for p in self.params]
        self.state = AdamState()

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr,
                   self.betas[0], self.betas[1], self.eps, self.decays)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_decay_lr(base_lr: float, step: int, total_steps: int, decay_at: float = 0.8,
                  factor: float = 0.1) -> float:
    """Constant ``base_lr`` until ``decay_at`` of training, then ``base_lr * factor``."""
    return base_lr * factor if step >= int(decay_at * total_steps) else base_lr
