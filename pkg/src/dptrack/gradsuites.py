"""Double-precision finite-difference suites over ops, prompters, blocks and the micro model.

Each case draws a seeded random instance and compares reverse-mode gradients
with central differences. Coordinates whose probes straddle a kink are excluded
by :func:`check_gradients`; a case fails if more than ``MAX_SKIP_FRACTION`` of
its probes had to be excluded.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .dpblock import DpBlock
from .geometry import BBox
from .gradcheck import GradCheckResult, check_gradients
from .model import Tracker, TrackerConfig, tracking_loss
from .prompters import IllumPrompter, PromptTokens, ViewPrompter
from .tensor import DOUBLE, Tensor, rng_stream

H = 1e-4
OP_TOL = 1e-5
MODEL_TOL = 1e-4
MAX_SKIP_FRACTION = 0.25
MAX_DRAWS = 5

Instance = tuple[Callable[[], Tensor], list[tuple[str, Tensor]]]


@dataclass
class CaseResult:
    name: str
    tol: float
    results: list[GradCheckResult]
    draw: int
    seconds: float = 0.0

    @property
    def n_checked(self) -> int:
        return sum(r.n_checked for r in self.results)

    @property
    def n_skipped(self) -> int:
        return sum(r.n_skipped for r in self.results)

    @property
    def worst(self) -> float:
        """Largest relative error among tensors whose gradient is not structurally zero."""
        return max((r.rel_error for r in self.results if not r.vanishing), default=0.0)

    @property
    def passed(self) -> bool:
        probes = self.n_checked + self.n_skipped
        return (all(r.passed(self.tol) for r in self.results)
                and self.n_skipped <= MAX_SKIP_FRACTION * max(probes, 1))

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28} worst rel err {self.worst:.2e} (tol {self.tol:.0e}) "
                f"coords {self.n_checked} skipped {self.n_skipped} draw {self.draw} {self.seconds:.1f}s")


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], Instance]
    tol: float = OP_TOL
    max_coords: int | None = None


def _t(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True, dtype=DOUBLE)


def _scalar_fn(forward: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    # a random projection exercises every output coordinate, unlike a plain sum
    w = rng.normal(size=forward().shape)
    return lambda: F.sum(F.mul(forward(), w))


def run_case(case: Case, seed: int = 0) -> CaseResult:
    """Check one case; redraw if some tensor had every probe straddle a kink."""
    t0 = time.perf_counter()
    for draw in range(MAX_DRAWS):
        fn, tensors = case.build(rng_stream(seed, draw))
        results = check_gradients(fn, tensors, h=H, max_coords=case.max_coords, seed=seed)
        if all(r.n_checked > 0 for r in results):
            break
    return CaseResult(case.name, case.tol, results, draw, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------
def _unary(op):
    def build(rng):
        x = _t(rng, 3, 4)
        return _scalar_fn(lambda: op(x), rng), [("x", x)]
    return build


def _positive_unary(op):
    def build(rng):
        x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=DOUBLE)
        return _scalar_fn(lambda: op(x), rng), [("x", x)]
    return build


def _binary(op):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        return _scalar_fn(lambda: op(a, b), rng), [("a", a), ("b", b)]
    return build


def _div(rng):
    a = _t(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, 4), requires_grad=True, dtype=DOUBLE)
    return _scalar_fn(lambda: F.div(a, b), rng), [("a", a), ("b", b)]


def _conv(groups: int, stride: int, padding: int):
    def build(rng):
        x, w, b = _t(rng, 2, 4, 6, 6), _t(rng, 6, 4 // groups, 3, 3), _t(rng, 6)
        return (_scalar_fn(lambda: F.conv2d(x, w, b, stride=stride, padding=padding, groups=groups), rng),
                [("x", x), ("w", w), ("b", b)])
    return build


def _conv_t(build_groups: int):
    def build(rng):
        x, w, b = _t(rng, 2, 2, 3, 3), _t(rng, 2, 4 // build_groups, 4, 4), _t(rng, 4)
        return (_scalar_fn(lambda: F.conv_transpose2d(x, w, b, stride=2, padding=1, groups=build_groups), rng),
                [("x", x), ("w", w), ("b", b)])
    return build


def _pad(mode: str):
    def build(rng):
        x = _t(rng, 1, 2, 4, 5)
        return _scalar_fn(lambda: F.pad2d(x, 2, mode), rng), [("x", x)]
    return build


def _gather(rng):
    x = _t(rng, 2, 3, 5, 6)
    ys = Tensor(rng.uniform(-1.5, 5.5, (2, 7)), requires_grad=True, dtype=DOUBLE)
    xs = Tensor(rng.uniform(-1.5, 6.5, (2, 7)), requires_grad=True, dtype=DOUBLE)
    return _scalar_fn(lambda: F.bilinear_gather(x, ys, xs), rng), [("map", x), ("ys", ys), ("xs", xs)]


def _sample(rng):
    x = _t(rng, 3, 4, 4)
    py = Tensor(rng.uniform(0, 3), requires_grad=True, dtype=DOUBLE)
    px = Tensor(rng.uniform(0, 3), requires_grad=True, dtype=DOUBLE)
    return _scalar_fn(lambda: F.bilinear_sample(x, (py, px)), rng), [("map", x), ("y", py), ("x", px)]


def _deform(rng):
    x, w, b = _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    off = _t(rng, 2, 18, 5, 5, scale=0.8)
    return (_scalar_fn(lambda: F.deform_conv2d(x, off, w, b), rng),
            [("x", x), ("offsets", off), ("w", w), ("b", b)])


def _layer_norm(rng):
    x, g, b = _t(rng, 4, 6), _t(rng, 6), _t(rng, 6)
    return _scalar_fn(lambda: F.layer_norm(x, g, b), rng), [("x", x), ("gamma", g), ("beta", b)]


def _batch_norm(training: bool):
    def build(rng):
        x, g, b = _t(rng, 3, 4, 3, 3), _t(rng, 4), _t(rng, 4)
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)

        def fwd():
            # fresh copies so training-mode running-stat updates never leak between calls
            return F.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=training)
        return _scalar_fn(fwd, rng), [("x", x), ("gamma", g), ("beta", b)]
    return build


def _mlp(rng):
    x, w1, b1, w2, b2 = _t(rng, 3, 5), _t(rng, 5, 7), _t(rng, 7), _t(rng, 7, 5), _t(rng, 5)
    return (_scalar_fn(lambda: F.mlp_forward(x, w1, b1, w2, b2), rng),
            [("x", x), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)])


def _mha(rng):
    d = 8
    x = _t(rng, 2, 5, d)
    ws = [_t(rng, d, d, scale=0.4) for _ in range(4)]
    bs = [_t(rng, d, scale=0.1) for _ in range(4)]
    fn = _scalar_fn(lambda: F.multi_head_attention(x, *ws, heads=2, bq=bs[0], bk=bs[1], bv=bs[2], bo=bs[3]), rng)
    named = [("x", x)] + [(f"w{n}", w) for n, w in zip("qkvo", ws)] + [(f"b{n}", b) for n, b in zip("qkvo", bs)]
    return fn, named


def _bce(rng):
    z = _t(rng, 2, 1, 3, 3, scale=2.0)
    target = rng.uniform(size=z.shape)
    return (lambda: F.bce_with_logits(z, target)), [("logits", z)]


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    return _scalar_fn(lambda: F.matmul(a, b), rng), [("a", a), ("b", b)]


def _linear(rng):
    x, w, b = _t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2)
    return _scalar_fn(lambda: F.linear(x, w, b), rng), [("x", x), ("w", w), ("b", b)]


def _shape_ops(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 2, 4)

    def fwd():
        c = F.concat([a, b], axis=1)
        t = F.transpose(F.reshape(c, (2, 5, 2, 2)), (3, 1, 0, 2))
        return F.add(F.getitem(t, (slice(None), [0, 2, 2], 1)), F.mean(c))
    return _scalar_fn(fwd, rng), [("a", a), ("b", b)]


def _reductions(rng):
    x = _t(rng, 3, 4, 2)
    return _scalar_fn(lambda: F.add(F.sum(x, axis=1, keepdims=True), F.mean(x, axis=(0, 2), keepdims=True)), rng), [("x", x)]


OP_CASES = [
    Case("add", _binary(F.add)), Case("sub", _binary(F.sub)), Case("mul", _binary(F.mul)),
    Case("div", _div),
    Case("minimum", _binary(F.minimum)), Case("maximum", _binary(F.maximum)),
    Case("exp", _unary(F.exp)), Case("log", _positive_unary(F.log)), Case("sqrt", _positive_unary(F.sqrt)),
    Case("power", _positive_unary(lambda x: F.power(x, 1.7))), Case("abs", _unary(F.abs)),
    Case("sigmoid", _unary(F.sigmoid)), Case("gelu", _unary(F.gelu)),
    Case("leaky_relu", _unary(lambda x: F.leaky_relu(x, 0.1))), Case("softmax", _unary(lambda x: F.softmax(x, -1))),
    Case("sum/mean", _reductions), Case("shape ops", _shape_ops), Case("matmul", _matmul), Case("linear", _linear),
    Case("conv2d", _conv(1, 1, 1)), Case("conv2d stride 2", _conv(1, 2, 0)), Case("conv2d grouped", _conv(2, 1, 1)),
    Case("conv_transpose2d", _conv_t(1)), Case("conv_transpose2d grouped", _conv_t(2)),
    Case("pad2d zero", _pad("zero")), Case("pad2d replicate", _pad("replicate")),
    Case("bilinear_gather", _gather), Case("bilinear_sample", _sample), Case("deform_conv2d", _deform),
    Case("layer_norm", _layer_norm), Case("batch_norm2d train", _batch_norm(True)),
    Case("batch_norm2d eval", _batch_norm(False)), Case("mlp_forward", _mlp),
    Case("multi_head_attention", _mha), Case("bce_with_logits", _bce),
]


# ---------------------------------------------------------------------------
# prompters, block, micro model
# ---------------------------------------------------------------------------
def _module_params(module, prefix: str) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{n}", t) for n, t in module.named_parameters()]


def _redraw(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Replace every parameter by an O(1) draw.

    Small-std inits leave layer-norm inputs with tiny variance, which inflates
    curvature and with it the truncation error of the differences themselves.
    """
    for _, t in module.named_parameters():
        if t.ndim < 2:
            t.data[...] = rng.normal(0.0, scale, t.shape)
            continue
        fan_in = t.shape[0] if t.ndim == 2 else int(np.prod(t.shape[1:]))  # linear weights are [in, out]
        t.data[...] = rng.normal(0.0, scale / np.sqrt(fan_in), t.shape)


def _illum(rng):
    p = IllumPrompter(3, 3, 2, 8, rng, DOUBLE)
    for _, t in p.named_parameters():
        t.data += rng.normal(0.0, 0.05, t.shape)  # move off the symmetric init
    img = Tensor(rng.uniform(size=(2, 3, 16, 16)), requires_grad=True, dtype=DOUBLE)
    return _scalar_fn(lambda: p(img), rng), [("image", img)] + _module_params(p, "illum")


def _view(rng):
    p = ViewPrompter(3, 2, 8, rng, dtype=DOUBLE)
    p.offset_conv.weight.data[...] = rng.normal(0.0, 0.5, p.offset_conv.weight.shape)
    p.offset_conv.bias.data[...] = rng.normal(0.0, 0.5, p.offset_conv.bias.shape)
    img = Tensor(rng.uniform(size=(2, 3, 8, 8)), requires_grad=True, dtype=DOUBLE)
    return _scalar_fn(lambda: p(img), rng), [("image", img)] + _module_params(p, "view")


def _block(rng):
    d = 8
    blk = DpBlock(d, 2, rng, dtype=DOUBLE)
    _redraw(blk, rng)
    x, pi, pv = _t(rng, 2, 6, d), _t(rng, 2, 6, d), _t(rng, 2, 6, d)
    w = [rng.normal(size=(2, 6, d)) for _ in range(3)]

    def fwd():
        y, qi, qv = blk(x, PromptTokens(pi, "illu"), PromptTokens(pv, "view"))
        return F.sum(F.mul(y, w[0])) + F.sum(F.mul(qi.tokens, w[1])) + F.sum(F.mul(qv.tokens, w[2]))
    return fwd, [("features", x), ("p_illu", pi), ("p_view", pv)] + _module_params(blk, "block")


def micro_config() -> TrackerConfig:
    return TrackerConfig(search_size=16, template_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                         n_pyramid_levels=3, illum_width=2, view_width=2, head_hidden=4, steps=1, batch_size=2)


def _model(rng):
    cfg = micro_config()
    cfg.seed = int(rng.integers(2 ** 31))
    model = Tracker(cfg, dtype="double")
    _redraw(model, rng)  # also gives the offset conv nonzero weights, so sampling is fractional
    # every upstream parameter moves all sample positions; damping that sensitivity
    # keeps most probes inside one bilinear cell
    model.backbone.view_prompter.offset_conv.weight.data *= 0.1
    tmpl = Tensor(rng.uniform(size=(2, 3, 8, 8)), dtype=DOUBLE)
    srch = Tensor(rng.uniform(size=(2, 3, 16, 16)), dtype=DOUBLE)
    gts = [BBox(*rng.uniform(3, 6, 2), *rng.uniform(4, 8, 2)) for _ in range(2)]

    def fwd():
        return tracking_loss(model(tmpl, srch), gts, cfg.patch_size, cfg.search_size)
    return fwd, [("template", tmpl), ("search", srch)] + [(n, t) for n, t in model.named_parameters()]


PROMPTER_CASES = [Case("illumination prompter", _illum, max_coords=24),
                  Case("viewpoint prompter", _view, max_coords=24)]
BLOCK_CASES = [Case("dpblock", _block, max_coords=24)]
MODEL_CASES = [Case("micro tracker", _model, tol=MODEL_TOL, max_coords=10)]

SUITES: dict[str, list[Case]] = {
    "ops": OP_CASES,
    "prompters": PROMPTER_CASES,
    "block": BLOCK_CASES,
    "model": MODEL_CASES,
}


def run_suite(scope: str, seed: int = 0, report: Callable[[str], None] | None = None) -> list[CaseResult]:
    if scope not in SUITES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SUITES)}")
    out = []
    for case in SUITES[scope]:
        res = run_case(case, seed)
        if report is not None:
            report(res.line())
        out.append(res)
    return out
