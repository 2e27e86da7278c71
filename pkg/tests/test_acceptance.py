"""Acceptance criteria 1-9.

Each test records a PASS/FAIL line in ``RESULTS``; ``conftest.py`` prints the
table at the end of the session. Run directly with ``python3 tests/test_acceptance.py``.
"""
import sys
import time

import numpy as np
import pytest

import oracles
from dptrack import functional as F
from dptrack.checkpoint import load_checkpoint, save_checkpoint
from dptrack.cli import EXIT_OK, main
from dptrack.data import SceneConfig, dumps_annotations, gen_dataset, load_ppm, loads_annotations, read_dataset, save_ppm
from dptrack.evaluation import (cle, iou, norm_precision, precision_at, precision_curve, run_ope, success_auc)
from dptrack.geometry import BBox
from dptrack.gradsuites import SUITES, run_suite
from dptrack.model import Tracker, TrackerConfig
from dptrack.prompters import IllumPrompter
from dptrack.tensor import DOUBLE, Tensor

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "baseline reduction (zero PFI coefficients)",
    2: "pyramid reconstruction",
    3: "pyramid init fidelity",
    4: "zero-offset deformable conv",
    5: "finite-difference gradients",
    6: "metric oracles",
    7: "toy overfit with defaults",
    8: "prompt effect on hard held-out sets",
    9: "serialization round trips",
}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def same_head(a, b):
    return all(np.array_equal(getattr(a, k).data, getattr(b, k).data)
               for k in ("center_logits", "size_map", "offset_map"))


def summary_lines():
    lines = []
    for n in sorted(TITLES):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {n}. {TITLES[n]}: {detail}")
        else:
            lines.append(f"[SKIP] {n}. {TITLES[n]}: not run")
    return lines


# -- 1 -----------------------------------------------------------------------------
def test_criterion_1_zero_coefficients_match_prompt_free_tracker():
    tracker = Tracker(TrackerConfig(seed=11))
    tracker.set_pfi_coefficients(0.0)
    g = np.random.default_rng(1)
    n, same = 12, 0
    for i in range(n):
        tracker.train() if i % 2 else tracker.eval()
        t = Tensor(g.random((2, 3, 64, 64)).astype(np.float32))
        s = Tensor(g.random((2, 3, 128, 128)).astype(np.float32))
        a, b = tracker(t, s, use_prompts=True), tracker(t, s, use_prompts=False)
        same += same_head(a, b)
    record(1, same == n, f"{same}/{n} random inputs bit-identical (train and eval mode)")


# -- 2 -----------------------------------------------------------------------------
def test_criterion_2_pyramid_reconstruction():
    eps = np.finfo(np.float64).eps
    worst, checked = 0.0, 0
    for seed in range(10):
        p = IllumPrompter(3, 3, 4, 16, np.random.default_rng(seed), dtype=DOUBLE)
        g = np.random.default_rng(50 + seed)
        for _, t in p.named_parameters():
            t.data = np.asarray(t.data + 0.3 * g.normal(size=t.shape))
        levels = p.pyramid(Tensor(g.random((2, 3, 64, 64))))
        for i, level in enumerate(p.levels):
            gi = levels.gaussians[i].data
            up = level.upsample(levels.gaussians[i + 1]).data
            err = np.abs(levels.laplacians[i].data + up - gi)
            # two roundings: one forming L, one adding UP back
            worst = max(worst, float((err / (eps * np.maximum(np.maximum(np.abs(gi), np.abs(up)), 1e-300))).max()))
            checked += 1
    record(2, worst <= 2.0, f"{checked} level pairs over 10 random prompters; max error {worst:.2f} ulp-units (bound 2)")


# -- 3 -----------------------------------------------------------------------------
def test_criterion_3_init_matches_fixed_kernel_pyramid():
    p = IllumPrompter(3, 3, 4, 16, np.random.default_rng(0), dtype=DOUBLE)
    img = np.random.default_rng(3).random((3, 64, 64))
    got = p.pyramid(Tensor(img))
    want_g, want_l = oracles.laplacian_pyramid(img, 3)
    rel = 0.0
    for a, b in zip(got.gaussians, want_g):
        rel = max(rel, float(np.abs(a.data[0] - b).max() / np.abs(b).max()))
    for a, b in zip(got.laplacians, want_l):
        rel = max(rel, float(np.abs(a.data[0] - b).max() / np.abs(b).max()))
    sums = np.concatenate([lv.blur.data.sum(axis=(1, 2, 3)) for lv in p.levels])
    sum_err = float(np.abs(sums - 1.0).max())
    record(3, rel < 1e-5 and sum_err <= 1e-6,
           f"max rel err {rel:.1e} over 4 Gaussian and 3 Laplacian levels; kernel sums within {sum_err:.1e} of 1")


# -- 4 -----------------------------------------------------------------------------
def test_criterion_4_zero_offset_deform_equals_conv():
    worst, n = 0.0, 0
    for seed in range(50):
        g = np.random.default_rng(seed)
        c, o = (int(v) for v in g.integers(1, 6, size=2))
        h, w = (int(v) for v in g.integers(3, 12, size=2))
        x, wt, b = (Tensor(v.astype(np.float32)) for v in
                    (g.normal(size=(2, c, h, w)), g.normal(size=(o, c, 3, 3)), g.normal(size=o)))
        a = F.deform_conv2d(x, Tensor(np.zeros((2, 18, h, w), np.float32)), wt, b).data
        ref = F.conv2d(x, wt, b, stride=1, padding=1).data
        worst = max(worst, float(np.abs(a - ref).max()))
        n += 1
    record(4, worst < 1e-6, f"{n} random float32 instances; max abs diff {worst:.1e}")


# -- 5 -----------------------------------------------------------------------------
def test_criterion_5_gradient_suites():
    start = time.perf_counter()
    failed, total, worst = [], 0, {}
    for scope in sorted(SUITES):
        for res in run_suite(scope):
            total += 1
            worst[scope] = max(worst.get(scope, 0.0), res.worst)
            if not res.passed:
                failed.append(res.line())
    seconds = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items()))
    record(5, not failed and seconds < 300,
           f"{total - len(failed)}/{total} cases pass in {seconds:.0f}s; worst rel err {detail}"
           + ("; failures: " + " | ".join(failed) if failed else ""))


# -- 6 -----------------------------------------------------------------------------
def test_criterion_6_metric_oracles():
    worst = 0.0
    for seed in range(100):
        g = np.random.default_rng(seed)
        n = int(g.integers(1, 60))
        gt = [BBox(*g.uniform(0, 200, 2), *g.uniform(4, 60, 2)) for _ in range(n)]
        pred = [BBox(b.x + g.normal(0, 10), b.y + g.normal(0, 10), b.w * g.uniform(0.5, 1.6), b.h * g.uniform(0.5, 1.6))
                for b in gt]
        p, q = [b.as_list() for b in pred], [b.as_list() for b in gt]
        curve = precision_curve(pred, gt)
        diffs = [abs(curve[t] - oracles.precision_at(p, q, t)) for t in range(51)]
        diffs += [abs(precision_at(pred, gt) - oracles.precision_at(p, q, 20)),
                  abs(norm_precision(pred, gt) - oracles.norm_precision(p, q)),
                  abs(success_auc(pred, gt) - oracles.success_auc(p, q))]
        worst = max(worst, max(diffs))
    hand = (iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) == 1 / 7
            and cle(BBox.from_center(0, 0, 2, 2), BBox.from_center(3, 4, 2, 2)) == 5.0)
    record(6, worst <= 1e-12 and hand,
           f"100 random trajectories, max deviation {worst:.1e}; IoU 1/7 and CLE 3-4-5 exact: {hand}")


# -- 7 and 8 share one default training run ---------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert main(["gen", "--out", str(root / "data"), "--seqs", "8"]) == EXIT_OK
    start = time.perf_counter()
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "model.ckpt")]) == EXIT_OK
    return root, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_7_toy_overfit(trained, tmp_path):
    root, seconds = trained
    cfg = TrackerConfig()
    tracker = load_checkpoint(root / "model.ckpt")
    _, agg, _ = run_ope(tracker, read_dataset(root / "data"))
    # the full run uses the same code path; a 20-step replay checks bitwise reproducibility
    data = root / "data"
    for name in ("a", "b"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / f"{name}.ckpt"), "--steps", "20"]) == EXIT_OK
    deterministic = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ok = (agg.precision_at_20 >= 0.9 and agg.mean_iou >= 0.5 and seconds < 900 and deterministic
          and cfg.steps <= 2000 and cfg.lr == 4e-4)
    record(7, ok, f"{cfg.steps} steps, batch {cfg.batch_size}, train {seconds:.0f}s; precision@20 "
                  f"{agg.precision_at_20:.3f}, mean IoU {agg.mean_iou:.3f}, success {agg.success_auc:.3f}; "
                  f"repeat run bit-identical: {deterministic}")


@pytest.mark.slow
def test_criterion_8_prompts_beat_zeroed_coefficients(trained):
    root, _ = trained
    with_prompts, zeroed = [], []
    for s in range(3):
        hard = gen_dataset(SceneConfig(seed=100 + s, illum_jitter=0.5, view_warp=0.3), 4)
        tracker = load_checkpoint(root / "model.ckpt")
        with_prompts.append(run_ope(tracker, hard)[1].success_auc)
        tracker.set_pfi_coefficients(0.0)
        zeroed.append(run_ope(tracker, hard)[1].success_auc)
    a, b = float(np.mean(with_prompts)), float(np.mean(zeroed))
    record(8, a >= b, f"mean success over 3 hard seeds: prompts {a:.3f} vs zeroed {b:.3f} "
                      f"(per seed {', '.join(f'{x:.3f}/{y:.3f}' for x, y in zip(with_prompts, zeroed))})")


# -- 9 -----------------------------------------------------------------------------
def test_criterion_9_serialization(tmp_path):
    cfg = TrackerConfig(embed_dim=16, depth=2, heads=2, illum_width=2, view_width=2, head_hidden=8, seed=4)
    tracker = Tracker(cfg)
    g = np.random.default_rng(0)
    for _, t in tracker.named_parameters():
        t.data = np.asarray(t.data + 0.05 * g.normal(size=t.shape).astype(t.data.dtype))
    save_checkpoint(tmp_path / "m.ckpt", tracker)
    back = load_checkpoint(tmp_path / "m.ckpt")
    tracker.eval(), back.eval()
    t = Tensor(g.random((1, 3, 64, 64)).astype(np.float32))
    s = Tensor(g.random((1, 3, 128, 128)).astype(np.float32))
    a, b = tracker(t, s), back(t, s)
    ckpt_ok = same_head(a, b)
    img = g.random((3, 17, 23))
    ppm_err = float(np.abs(load_ppm(save_ppm(img)) - img).max())
    boxes = [BBox(*g.uniform(-1e3, 1e3, 2), *g.uniform(0, 1e3, 2)) for _ in range(50)]
    jsonl_ok = loads_annotations(dumps_annotations(boxes)) == boxes
    record(9, ckpt_ok and ppm_err <= 1 / 510 + 1e-7 and jsonl_ok,
           f"checkpoint forward bit-identical: {ckpt_ok}; PPM max err {ppm_err:.2e} (bound 1/510); "
           f"JSONL exact: {jsonl_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
