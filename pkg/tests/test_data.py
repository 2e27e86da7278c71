import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dptrack.data import (DataFormatError, SceneConfig, Sequence, dumps_annotations, gen_dataset, gen_sequence,
                          load_ppm, loads_annotations, read_dataset, read_sequence, save_ppm, write_dataset)
from dptrack.geometry import BBox


def still(**kw):
    base = dict(illum_jitter=0.0, view_warp=0.0, motion=0.0, noise_sigma=0.0, n_frames=5)
    base.update(kw)
    return SceneConfig(**base)


# -- generation ----------------------------------------------------------------
def test_degenerate_dynamics_give_identical_frames():
    seq = gen_sequence(still(seed=4))
    for f, b in zip(seq.frames, seq.annotations):
        np.testing.assert_array_equal(f, seq.frames[0])
        assert b == seq.annotations[0]


def test_same_seed_is_bit_identical():
    a, b = gen_sequence(SceneConfig(seed=11, n_frames=6)), gen_sequence(SceneConfig(seed=11, n_frames=6))
    for x, y in zip(a.frames, b.frames):
        assert x.tobytes() == y.tobytes()
    assert a.annotations == b.annotations
    c = gen_sequence(SceneConfig(seed=12, n_frames=6))
    assert not np.array_equal(a.frames[0], c.frames[0])


@pytest.mark.parametrize("seed", range(3))
def test_dark_scene_mean_brightness(seed):
    cfg = still(seed=seed)
    mean = np.mean([f.mean() for f in gen_sequence(cfg).frames])
    assert abs(mean - cfg.base_brightness) <= 0.05


@pytest.mark.parametrize("cfg", [SceneConfig(seed=1, n_frames=30),
                                 SceneConfig(seed=2, n_frames=30, illum_jitter=0.5, view_warp=0.3, motion=6.0),
                                 SceneConfig(seed=3, n_frames=30, target_shape="disc", frame_size=96, target_size=16)])
def test_pixels_and_boxes_stay_in_range(cfg):
    seq = gen_sequence(cfg)
    for f, b in zip(seq.frames, seq.annotations):
        assert f.dtype == np.float32 and f.shape == (3, cfg.frame_size, cfg.frame_size)
        assert f.min() >= 0.0 and f.max() <= 1.0
        assert b.x >= 1.0 and b.y >= 1.0
        assert b.x + b.w <= cfg.frame_size - 1.0 and b.y + b.h <= cfg.frame_size - 1.0


def test_annotation_tracks_rendered_target():
    cfg = still(seed=5, base_brightness=0.05, target_brightness=0.9)
    seq = gen_sequence(cfg)
    frame, box = seq.frames[0], seq.annotations[0]
    bright = frame.mean(axis=0) > 0.5
    ys, xs = np.nonzero(bright)
    cx, cy = box.center
    assert abs(xs.mean() + 0.5 - cx) < 1.5 and abs(ys.mean() + 0.5 - cy) < 1.5


def test_target_moves_with_motion():
    seq = gen_sequence(SceneConfig(seed=6, n_frames=20, motion=3.0))
    centers = np.array([b.center for b in seq.annotations])
    steps = np.abs(np.diff(centers, axis=0))
    assert steps.max() > 0.0
    assert np.all(steps <= 2 * 3.0 + 1e-9)


def test_dataset_seeds_differ_per_sequence():
    seqs = gen_dataset(SceneConfig(n_frames=2), 3)
    assert [s.name for s in seqs] == ["seq_0", "seq_1", "seq_2"]
    assert not np.array_equal(seqs[0].frames[0], seqs[1].frames[0])


@pytest.mark.parametrize("kw,msg", [({"view_warp": 0.6}, "view_warp"), ({"motion": -1.0}, "motion"),
                                     ({"target_size": 150.0}, "does not fit"), ({"target_shape": "star"}, "target_shape"),
                                     ({"base_brightness": 0.0}, "base_brightness")])
def test_invalid_scene_configs(kw, msg):
    with pytest.raises(ValueError, match=msg):
        SceneConfig(**kw)


def test_scene_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown scene config keys"):
        SceneConfig.from_dict({"brightness": 0.2})
    assert SceneConfig.from_dict(SceneConfig(seed=3).to_dict()) == SceneConfig(seed=3)


def test_sequence_length_mismatch():
    with pytest.raises(ValueError, match="annotations"):
        Sequence([np.zeros((3, 4, 4))], [])


# -- PPM ---------------------------------------------------------------------
def test_ppm_header_for_two_by_one():
    raw = save_ppm(np.zeros((3, 1, 2)))
    assert raw[:11] == b"P6\n2 1\n255\n" and len(raw) == 11 + 6


def test_hand_written_white_pixel():
    img = load_ppm(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(img, np.ones((3, 1, 1)))


def test_ppm_round_half_up():
    raw = save_ppm(np.full((3, 1, 1), 0.5 / 255))
    assert raw[-3:] == b"\x01\x01\x01"


def test_ppm_channel_order():
    img = np.zeros((3, 1, 2))
    img[0, 0, 0] = 1.0
    img[2, 0, 1] = 1.0
    assert save_ppm(img)[11:] == b"\xff\x00\x00\x00\x00\xff"


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2 ** 32 - 1))
def test_ppm_round_trip_within_quantization(h, w, seed):
    img = np.random.default_rng(seed).random((3, h, w))
    back = load_ppm(save_ppm(img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 510 + 1e-7


def test_ppm_header_comments_and_maxval():
    img = load_ppm(b"P6 # made by hand\n1 1\n# another\n15\n\x0f\x00\x05")
    np.testing.assert_allclose(img[:, 0, 0], [1.0, 0.0, 1 / 3], rtol=1e-6)


@pytest.mark.parametrize("raw,msg", [(b"P5\n1 1\n255\n\x00", "header"), (b"P6\n2 2\n255\n\x00\x00", "truncated"),
                                     (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"), (b"", "header")])
def test_malformed_ppm(raw, msg):
    with pytest.raises(DataFormatError, match=msg):
        load_ppm(raw)


def test_save_ppm_rejects_out_of_range():
    with pytest.raises(ValueError, match="within"):
        save_ppm(np.full((3, 1, 1), 1.5))


# -- annotations -------------------------------------------------------------------
box_strategy = st.builds(BBox, st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(0, 1e4), st.floats(0, 1e4))


@settings(max_examples=60, deadline=None)
@given(st.lists(box_strategy, max_size=12))
def test_annotation_round_trip(boxes):
    assert loads_annotations(dumps_annotations(boxes)) == boxes


def test_empty_annotation_file():
    assert loads_annotations("") == []


def test_out_of_order_indices_name_the_line():
    text = json.dumps({"frame": 0, "x": 1, "y": 1, "w": 2, "h": 2}) + "\n" + \
        json.dumps({"frame": 2, "x": 1, "y": 1, "w": 2, "h": 2}) + "\n"
    with pytest.raises(DataFormatError, match="line 2"):
        loads_annotations(text)


def test_malformed_annotation_line():
    with pytest.raises(DataFormatError, match="line 1"):
        loads_annotations('{"frame": 0, "x": 1}\n')
    with pytest.raises(DataFormatError, match="line 1"):
        loads_annotations("not json\n")


# -- directory layout ------------------------------------------------------------------
def test_dataset_directory_round_trip(tmp_path):
    seqs = gen_dataset(SceneConfig(n_frames=3, frame_size=64, target_size=12), 2)
    dirs = write_dataset(tmp_path, seqs)
    assert [d.name for d in dirs] == ["seq_0", "seq_1"]
    assert sorted(p.name for p in dirs[0].iterdir()) == ["frame_0.ppm", "frame_1.ppm", "frame_2.ppm", "gt.jsonl"]
    back = read_dataset(tmp_path)
    for s, b in zip(seqs, back):
        assert b.annotations == s.annotations
        for f, g in zip(s.frames, b.frames):
            assert np.abs(f - g).max() <= 1 / 510 + 1e-7


def test_read_sequence_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_sequence(tmp_path)
    (tmp_path / "frame_0.ppm").write_bytes(save_ppm(np.zeros((3, 2, 2))))
    with pytest.raises(FileNotFoundError, match="ground truth"):
        read_sequence(tmp_path)
    assert len(read_sequence(tmp_path, require_gt=False)) == 1
    (tmp_path / "frame_2.ppm").write_bytes(save_ppm(np.zeros((3, 2, 2))))
    with pytest.raises(DataFormatError, match="contiguous"):
        read_sequence(tmp_path, require_gt=False)
