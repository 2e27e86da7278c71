import csv
import json

import numpy as np
import pytest

import oracles
from dptrack.data import SceneConfig, Sequence, gen_dataset
from dptrack.evaluation import (MetricReport, aggregate, cle, iou, norm_precision, normalized_errors, precision_at,
                                precision_curve, run_ope, success_auc, success_curve, write_curves_csv,
                                write_report_json)
from dptrack.geometry import BBox
from dptrack.model import Tracker, TrackerConfig


def random_trajectory(seed, n=None):
    g = np.random.default_rng(seed)
    n = n or int(g.integers(1, 60))
    gt = [BBox(*g.uniform(0, 200, 2), *g.uniform(4, 60, 2)) for _ in range(n)]
    pred = []
    for b in gt:
        if g.random() < 0.2:
            pred.append(BBox(*g.uniform(0, 300, 2), *g.uniform(0, 80, 2)))
        else:
            pred.append(BBox(b.x + g.normal(0, 8), b.y + g.normal(0, 8), b.w * g.uniform(0.6, 1.5), b.h * g.uniform(0.6, 1.5)))
    return pred, gt


# -- hand examples -----------------------------------------------------------
def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BBox(1, 1, 2, 2)) == 1 / 7
    assert iou(BBox(0, 0, 0, 0), BBox(0, 0, 0, 0)) == 0.0


def test_cle_examples():
    a, b = BBox.from_center(10, 10, 4, 4), BBox.from_center(13, 14, 6, 2)
    assert cle(a, a) == 0.0
    assert cle(a, b) == 5.0
    assert cle(b, a) == cle(a, b)


def test_perfect_trajectory_maxima():
    _, gt = random_trajectory(0, 30)
    assert np.all(precision_curve(gt, gt) == 1.0)
    assert norm_precision(gt, gt) == 1.0
    assert success_auc(gt, gt) == 20 / 21


def test_disjoint_trajectory_has_zero_success():
    gt = [BBox(0, 0, 5, 5)] * 4
    pred = [BBox(50, 50, 5, 5)] * 4
    assert success_auc(pred, gt) == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        precision_curve([BBox(0, 0, 1, 1)], [])
    with pytest.raises(ValueError, match="length"):
        success_auc([], [BBox(0, 0, 1, 1)])


def test_zero_size_ground_truth():
    with pytest.raises(ValueError, match="zero size"):
        norm_precision([BBox(0, 0, 1, 1)], [BBox(0, 0, 0, 3)])


def test_precision_boundary_is_inclusive():
    gt = [BBox.from_center(0, 0, 4, 4)]
    assert precision_at([BBox.from_center(12, 16, 4, 4)], gt, 20.0) == 1.0


# -- brute-force oracles ---------------------------------------------------------
def test_metrics_match_brute_force_over_100_trajectories():
    for seed in range(100):
        pred, gt = random_trajectory(seed)
        p, g = [b.as_list() for b in pred], [b.as_list() for b in gt]
        curve = precision_curve(pred, gt)
        for tau in (0, 5, 20, 50):
            assert abs(curve[tau] - oracles.precision_at(p, g, tau)) <= 1e-12
        assert abs(precision_at(pred, gt) - oracles.precision_at(p, g, 20)) <= 1e-12
        assert abs(norm_precision(pred, gt) - oracles.norm_precision(p, g)) <= 1e-12
        assert abs(success_auc(pred, gt) - oracles.success_auc(p, g)) <= 1e-12
        for a, b in zip(pred, gt):
            assert abs(iou(a, b) - oracles.box_iou(a.as_list(), b.as_list())) <= 1e-12


def test_curves_are_monotone():
    for seed in range(20):
        pred, gt = random_trajectory(seed)
        assert np.all(np.diff(precision_curve(pred, gt)) >= 0)
        assert np.all(np.diff(success_curve(pred, gt)) <= 0)


def test_frame_reordering_invariance():
    pred, gt = random_trajectory(3, 40)
    perm = np.random.default_rng(0).permutation(40)
    rp, rg = [pred[i] for i in perm], [gt[i] for i in perm]
    a, b = MetricReport.from_trajectories(pred, gt), MetricReport.from_trajectories(rp, rg)
    assert a.summary() == pytest.approx(b.summary(), abs=1e-15)


def test_norm_precision_scale_invariance():
    pred, gt = random_trajectory(4, 40)

    def scale(bs):
        return [BBox(b.x * 2, b.y * 2, b.w * 2, b.h * 2) for b in bs]

    assert norm_precision(scale(pred), scale(gt)) == norm_precision(pred, gt)
    np.testing.assert_allclose(normalized_errors(scale(pred), scale(gt)), normalized_errors(pred, gt), rtol=1e-13)


# -- one-pass evaluation ---------------------------------------------------------------
def oracle_ope(sequences):
    """run_ope with a stub whose predictions, mapped back to the frame, equal ground truth."""
    import dptrack.inference as inf

    class Stub:
        cfg = TrackerConfig()

    stub = Stub()
    truth = {}
    for s in sequences:
        for f, b in zip(s.frames, s.annotations):
            truth[id(f)] = b

    original_crop = inf.crop
    state = {}

    def spy_crop(frame, window):
        state["frame"], state["window"] = frame, window
        return original_crop(frame, window)

    def predict(template, search):
        return state["window"].to_crop(truth[id(state["frame"])])

    stub.predict = predict
    inf.crop = spy_crop
    try:
        return run_ope(stub, sequences)
    finally:
        inf.crop = original_crop


@pytest.fixture(scope="module")
def seqs():
    return gen_dataset(SceneConfig(n_frames=8, seed=2), 3)


def test_oracle_stub_reaches_maxima(seqs):
    per_seq, agg, preds = oracle_ope(seqs)
    assert set(per_seq) == {"seq_0", "seq_1", "seq_2"}
    assert agg.precision_at_20 == 1.0 and agg.norm_precision_at_02 == 1.0
    assert agg.success_auc == pytest.approx(20 / 21, abs=1e-12)
    assert agg.n_frames == 24


def test_aggregate_of_identical_sequences():
    pred, gt = random_trajectory(9, 25)
    one = MetricReport.from_trajectories(pred, gt)
    agg = aggregate([one, one, one])
    assert agg.summary() == one.summary() | {"n_frames": 75}


def test_aggregate_is_frame_weighted():
    p1, g1 = random_trajectory(1, 10)
    p2, g2 = random_trajectory(2, 30)
    agg = aggregate([MetricReport.from_trajectories(p1, g1), MetricReport.from_trajectories(p2, g2)])
    whole = MetricReport.from_trajectories(p1 + p2, g1 + g2)
    assert agg.summary() == pytest.approx(whole.summary(), abs=1e-15)


def test_run_ope_requires_ground_truth():
    seq = Sequence([np.zeros((3, 8, 8), np.float32)] * 2, [BBox(1, 1, 2, 2)] * 2)
    seq.annotations = seq.annotations[:1]
    with pytest.raises(ValueError, match="ground truth"):
        run_ope(Tracker(TrackerConfig()), [seq])


def test_run_ope_reproducible_and_worker_independent(seqs):
    tracker = Tracker(TrackerConfig(embed_dim=16, depth=1, heads=2, illum_width=2, view_width=2))
    short = [Sequence(s.frames[:4], s.annotations[:4], s.name) for s in seqs]
    a = run_ope(tracker, short)
    b = run_ope(tracker, short, workers=3)
    assert a[1] == b[1]
    assert a[2] == b[2]


def test_report_outputs(tmp_path):
    pred, gt = random_trajectory(5, 12)
    rep = MetricReport.from_trajectories(pred, gt)
    write_report_json(tmp_path / "r.json", {"s": rep}, rep)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["aggregate"]["precision_at_20"] == rep.precision_at_20
    assert len(doc["sequences"]["s"]["per_frame_iou"]) == 12
    write_curves_csv(tmp_path / "c.csv", {"s": rep}, rep)
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert len(rows) == 2 * (51 + 21)
    assert {r["curve"] for r in rows} == {"precision", "success"}
