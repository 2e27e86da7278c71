"""Central finite-difference checks for reverse-mode gradients.

Errors are reported per tensor as ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``
so that near-zero individual entries do not dominate. Gradients that vanish by
structure (a bias feeding a normalisation, a key bias under softmax) make that
ratio compare rounding noise with rounding noise, so a check also passes when
both gradients are below ``ATOL`` in norm. Large tensors can be checked on a
random subset of coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .functional import KinkLog, kink_monitor
from .tensor import Tensor, finite_checks, no_grad


ATOL = 1e-8


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_checked: int
    abs_error: float = 0.0
    n_skipped: int = 0
    scale: float = 0.0  # max(||analytic||, ||numeric||)

    @property
    def vanishing(self) -> bool:
        return self.scale < ATOL

    def passed(self, tol: float) -> bool:
        return self.n_checked > 0 and (self.rel_error < tol or self.vanishing)


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4,
                   coords: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. ``t`` at flat ``coords``."""
    flat = t.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    out = np.empty(len(coords), dtype=np.float64)
    for j, i in enumerate(coords):
        out[j] = _central(fn, flat, int(i), h)[0]
    return coords, out


def _central(fn, flat: np.ndarray, i: int, h: float, base: KinkLog | None = None) -> tuple[float, bool]:
    """Difference quotient at ``flat[i]`` and whether both probes stayed on the base branches."""
    orig = flat[i]
    try:
        flat[i] = orig + h
        with kink_monitor() as lp:
            fp = float(fn().data)
        flat[i] = orig - h
        with kink_monitor() as lm:
            fm = float(fn().data)
    finally:
        flat[i] = orig
    same = base is None or (base.same_branches(lp) and base.same_branches(lm))
    return (fp - fm) / (2.0 * h), same


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[tuple[str, Tensor]], h: float = 1e-4,
                    max_coords: int | None = None, seed: int = 0) -> list[GradCheckResult]:
    """Compare analytic and numeric gradients of scalar ``fn()`` for each named tensor.

    ``fn`` must be deterministic and rebuild the graph on every call. Tensors
    should hold float64 data; they are perturbed in place and restored.

    A coordinate whose +-h probes put any piecewise op (LeakyReLU, abs, min/max,
    a bilinear cell) on a different branch than the unperturbed point straddles
    a kink, where a difference quotient is not a derivative estimate. Such
    coordinates are skipped and counted; with ``max_coords`` the next random
    coordinate takes their place.
    """
    for _, t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks require double precision tensors")
        t.requires_grad = True
        t.grad = None
    with kink_monitor() as base:
        loss = fn()
    loss.backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for name, t in tensors}
    rng = np.random.default_rng(seed)
    results = []
    with finite_checks(False), no_grad():
        for name, t in tensors:
            flat = t.data.reshape(-1)
            order = np.arange(t.size) if max_coords is None else rng.permutation(t.size)
            want = t.size if max_coords is None else min(max_coords, t.size)
            used, num, skipped = [], [], 0
            for i in order:
                if len(used) == want:
                    break
                val, same = _central(fn, flat, int(i), h, base)
                if same:
                    used.append(int(i))
                    num.append(val)
                else:
                    skipped += 1
            ana = analytic[name].reshape(-1)[np.array(used, dtype=np.int64)]
            num = np.array(num)
            results.append(GradCheckResult(name, relative_error(ana, num), len(used),
                                           float(np.linalg.norm(ana - num)), skipped,
                                           float(max(np.linalg.norm(ana), np.linalg.norm(num)))))
    return results


def worst(results: Sequence[GradCheckResult]) -> GradCheckResult:
    return max(results, key=lambda r: r.rel_error)
