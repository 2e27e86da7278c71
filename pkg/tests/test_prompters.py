import numpy as np
import pytest

import oracles
from dptrack import functional as F
from dptrack.gradsuites import PROMPTER_CASES, run_case
from dptrack.nn import Linear
from dptrack.prompters import IllumPrompter, PromptTokens, ViewPrompter, gaussian_kernel, tokenize_prompt
from dptrack.tensor import DOUBLE, Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def illum(width=4, levels=3, patch=16, seed=0):
    return IllumPrompter(3, levels, width, patch, np.random.default_rng(seed), dtype=DOUBLE)


def view(width=4, patch=16, seed=0, deformable=True):
    return ViewPrompter(3, width, patch, np.random.default_rng(seed), deformable=deformable, dtype=DOUBLE)


def randomize(module, seed, scale=0.3):
    g = np.random.default_rng(seed)
    for _, t in module.named_parameters():
        t.data = np.asarray(t.data + scale * g.normal(size=t.shape))


# -- Gaussian / Laplacian levels -----------------------------------------------
def test_constant_image_stays_constant_at_every_level():
    gs = illum().build_gaussian_levels(T(np.full((3, 64, 64), 0.37)))
    for g in gs:
        np.testing.assert_allclose(g.data, 0.37, rtol=0, atol=1e-12)


def test_level_sizes_halve():
    gs = illum().build_gaussian_levels(T(np.zeros((3, 64, 64))))
    assert [g.shape[-1] for g in gs] == [64, 32, 16, 8]
    assert len(illum().build_laplacian_levels(gs)) == 3


def test_indivisible_size_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        illum().build_gaussian_levels(T(np.zeros((3, 60, 64))))


def test_laplacian_length_mismatch():
    p = illum()
    gs = p.build_gaussian_levels(T(np.zeros((3, 64, 64))))
    with pytest.raises(ValueError, match="gaussian levels"):
        p.build_laplacian_levels(gs[:-1])


def test_first_gaussian_level_matches_stencil_oracle():
    img = np.random.default_rng(1).random((3, 32, 32))
    g1 = illum().build_gaussian_levels(T(img))[1].data[0]
    np.testing.assert_allclose(g1, oracles.blur_down(img), rtol=1e-6, atol=1e-12)


def test_constant_image_has_flat_laplacians():
    p = illum()
    for lap in p.pyramid(T(np.full((3, 64, 64), 0.8))).laplacians:
        assert np.abs(lap.data).max() < 1e-6


def test_level0_laplacian_matches_classic_pyramid():
    img = np.random.default_rng(2).random((3, 32, 32))
    lap0 = illum().pyramid(T(img)).laplacians[0].data[0]
    _, want = oracles.laplacian_pyramid(img, 1)
    np.testing.assert_allclose(lap0, want[0], rtol=1e-5, atol=1e-12)


def test_blur_kernels_sum_to_one():
    for level in illum().levels:
        sums = level.blur.data.sum(axis=(1, 2, 3))
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    np.testing.assert_allclose(gaussian_kernel().sum(), 1.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_holds_for_random_parameters(seed):
    p = illum(seed=seed)
    randomize(p, seed)
    img = np.random.default_rng(100 + seed).random((2, 3, 64, 64))
    levels = p.pyramid(T(img))
    for i, level in enumerate(p.levels):
        g = levels.gaussians[i].data
        up = level.upsample(levels.gaussians[i + 1]).data
        recon = levels.laplacians[i].data + up
        # one rounding in the subtraction and one in the addition
        bound = 2 * np.finfo(np.float64).eps * np.maximum(np.abs(g), np.abs(up))
        assert np.all(np.abs(recon - g) <= bound)


# -- illumination prompt map ---------------------------------------------------
def test_zero_level_convs_give_zero_map():
    p = illum()
    for level in p.levels:
        level.conv.weight.data[...] = 0.0
        level.conv.bias.data[...] = 0.0
    out = p(T(np.random.default_rng(0).random((3, 128, 128))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_illum_map_shape():
    p = illum(width=5)
    out = p(T(np.zeros((3, 128, 128))))
    assert out.shape == (3 * 5, 8, 8)
    assert p.out_channels == 15


# -- viewpoint prompter --------------------------------------------------------
def test_coarse_view_zero_weights_give_zero():
    p = view()
    p.coarse_conv.weight.data[...] = 0.0
    p.coarse_conv.bias.data[...] = 0.0
    out = p.coarse_view(T(np.random.default_rng(0).random((2, 3, 16, 16))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_leaky_relu_slope():
    np.testing.assert_array_equal(F.leaky_relu(T([-2.0, 3.0]), 0.1).data, [-0.2, 3.0])


def test_coarse_view_matches_composed_oracle():
    p = view()
    randomize(p, 3)
    x = np.random.default_rng(3).random((2, 3, 8, 8))
    got = p.coarse_view(T(x)).data
    want = oracles.leaky(oracles.batch_norm_train(
        oracles.conv2d(x, p.coarse_conv.weight.data, p.coarse_conv.bias.data, 1, 1),
        p.coarse_bn.gamma.data, p.coarse_bn.beta.data))
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-10)


def test_batch_norm_needs_two_samples_in_training():
    with pytest.raises(ValueError, match="at least 2"):
        view().coarse_view(T(np.zeros((1, 3, 8, 8))))


def test_offsets_zero_at_init_and_have_18_channels():
    p = view()
    coarse = p.coarse_view(T(np.random.default_rng(0).random((2, 3, 16, 16))))
    off = p.predict_offsets(coarse)
    assert off.shape == (2, 18, 16, 16)
    np.testing.assert_array_equal(off.data, 0.0)
    randomize(p, 1)
    assert np.all(np.isfinite(p.predict_offsets(coarse).data))


def test_zero_offset_deform_conv_equals_conv2d():
    for seed in range(50):
        g = np.random.default_rng(seed)
        c, o = (int(v) for v in g.integers(1, 6, size=2))
        h, w = (int(v) for v in g.integers(3, 12, size=2))
        x, wt, b = g.normal(size=(2, c, h, w)), g.normal(size=(o, c, 3, 3)), g.normal(size=o)
        for dtype in (np.float32, np.float64):
            args = [Tensor(v.astype(dtype)) for v in (x, wt, b)]
            a = F.deform_conv2d(args[0], Tensor(np.zeros((2, 18, h, w), dtype)), args[1], args[2]).data
            ref = F.conv2d(args[0], args[1], args[2], stride=1, padding=1).data
            assert np.abs(a - ref).max() < 1e-6, (seed, dtype)


def test_deform_conv_constant_map_interior():
    w = np.random.default_rng(0).random((1, 1, 3, 3))
    x = np.full((1, 1, 7, 7), 0.5)
    out = F.deform_conv2d(T(x), T(np.zeros((1, 18, 7, 7))), T(w), T([0.0])).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 0.5 * w.sum(), rtol=1e-12)


def test_deform_conv_random_offsets_match_gather_oracle():
    g = np.random.default_rng(5)
    x, w, b = g.normal(size=(2, 3, 5, 6)), g.normal(size=(4, 3, 3, 3)), g.normal(size=4)
    off = g.normal(scale=1.5, size=(2, 18, 5, 6))
    got = F.deform_conv2d(T(x), T(off), T(w), T(b)).data
    np.testing.assert_allclose(got, oracles.deform_conv(x, off, w, b), rtol=1e-5, atol=1e-10)


def test_deform_conv_offset_shape_error():
    with pytest.raises(ValueError, match="offsets must be"):
        F.deform_conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 9, 4, 4))), T(np.zeros((2, 2, 3, 3))))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_view_prompt_at_init_equals_plain_conv_pipeline(dtype):
    img = Tensor(np.random.default_rng(0).random((2, 3, 128, 128)).astype(dtype))
    a = ViewPrompter(3, 4, 16, np.random.default_rng(1), dtype=np.dtype(dtype))
    b = ViewPrompter(3, 4, 16, np.random.default_rng(1), deformable=False, dtype=np.dtype(dtype))
    out = a(img)
    assert out.shape == (2, 4, 8, 8)
    np.testing.assert_array_equal(out.data, b(img).data)


@pytest.mark.parametrize("case", PROMPTER_CASES, ids=lambda c: c.name)
def test_prompter_gradients(case):
    result = run_case(case, seed=0)
    assert result.passed, result.line()


# -- tokens --------------------------------------------------------------------
def test_tokenize_zero_map_gives_bias_rows():
    proj = Linear(6, 4, np.random.default_rng(0), dtype=DOUBLE)
    proj.bias.data[...] = [1.0, 2.0, 3.0, 4.0]
    tokens = tokenize_prompt(T(np.zeros((6, 3, 5))), proj)
    assert tokens.shape == (15, 4)
    np.testing.assert_array_equal(tokens.data, np.tile([1.0, 2.0, 3.0, 4.0], (15, 1)))


def test_tokenize_count_mismatch():
    proj = Linear(2, 4, np.random.default_rng(0), dtype=DOUBLE)
    with pytest.raises(ValueError, match="expects 64"):
        tokenize_prompt(T(np.zeros((2, 4, 4))), proj, n_tokens=64)


def test_tokenize_permutation_consistency():
    g = np.random.default_rng(9)
    proj = Linear(5, 3, g, dtype=DOUBLE)
    m = g.normal(size=(5, 4, 4))
    perm = g.permutation(16)
    permuted = m.reshape(5, 16)[:, perm].reshape(5, 4, 4)
    a = tokenize_prompt(T(m), proj).data
    b = tokenize_prompt(T(permuted), proj).data
    np.testing.assert_array_equal(b, a[perm])


def test_prompt_tokens_kind_validation():
    with pytest.raises(ValueError, match="kind"):
        PromptTokens(T(np.zeros((2, 2))), "depth")
