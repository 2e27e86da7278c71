"""Parameter containers.

A :class:`Module` discovers its tensors by walking attributes: tensors with
``requires_grad`` are trainable parameters, the rest (batch-norm running
statistics, frozen weights) are buffers. Both end up in ``state_dict``.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import SINGLE, Tensor


class Module:
    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_tensors(full + ".")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors() if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.dtype)

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = np.asarray(t.data, dtype=dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))


def _param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02, dtype=SINGLE):
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True, dtype=SINGLE):
        fan_in = (c_in // groups) * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (c_out, c_in // groups, kernel, kernel)), dtype)
        self.bias = _param(rng.uniform(-bound, bound, c_out), dtype) if bias else None
        self._stride, self._padding, self._groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self._stride, self._padding, self._groups)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=SINGLE):
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self._eps)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, dtype=SINGLE):
        self.gamma = _param(np.ones(c), dtype)
        self.beta = _param(np.zeros(c), dtype)
        self.running_mean = Tensor(np.zeros(c), dtype=dtype)
        self.running_var = Tensor(np.ones(c), dtype=dtype)
        self._eps, self._momentum = eps, momentum

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                              self.training, self._momentum, self._eps)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dtype=SINGLE):
        self.fc1 = Linear(d, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.mlp_forward(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=SINGLE):
        if d % heads:
            raise ValueError(f"embed dim {d} not divisible by heads={heads}")
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.proj = Linear(d, d, rng, dtype=dtype)
        self._heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        return F.multi_head_attention(x, self.q.weight, self.k.weight, self.v.weight, self.proj.weight,
                                      self._heads, self.q.bias, self.k.bias, self.v.bias, self.proj.bias)
