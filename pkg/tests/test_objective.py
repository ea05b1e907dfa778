"""Losses, image metrics, color grids, and depth alignment."""
import numpy as np
import pytest

from testkit import reference_psnr, reference_ssim
from volvid.objective import (BilateralGrid, DepthAlignmentError, LossWeights,
                              align_depth, apply_color_grid, bilinear_sample,
                              color_grid_backward, color_loss, depth_loss,
                              dssim_loss, flow_loss, l1_loss, psnr, reg_loss,
                              ssim, total_loss)


def _image(rng, h=24, w=20):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


# ----------------------------------------------------------------- metrics

def test_psnr_identical_images_cap(rng):
    img = _image(rng)
    assert psnr(img, img) == 100.0
    assert psnr(img, img + 1e-7) == 100.0  # mse below the cap threshold


def test_psnr_known_mse():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.5)
    # mse = 0.25 -> 10 log10(1 / 0.25)
    assert abs(psnr(a, b) - 10.0 * np.log10(4.0)) < 1e-12


def test_psnr_matches_reference_on_random_pairs(rng):
    for _ in range(10):
        a, b = _image(rng), _image(rng)
        assert abs(psnr(a, b) - reference_psnr(a, b)) < 1e-12


def test_ssim_identical_images_is_one(rng):
    img = _image(rng, 16, 16)
    assert abs(ssim(img, img) - 1.0) < 1e-12


def test_ssim_matches_independent_implementation(rng):
    for _ in range(5):
        a = _image(rng, 21, 17)
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-9


def test_ssim_rejects_small_and_mismatched_images(rng):
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


# ------------------------------------------------------------------ losses

def test_l1_loss_value_and_gradient(rng):
    a, b = _image(rng), _image(rng)
    v, g = l1_loss(a, b)
    assert abs(v - np.abs(a - b).mean()) < 1e-15
    assert np.array_equal(g, np.sign(a - b) / a.size)


def test_dssim_zero_for_identical_and_positive_otherwise(rng):
    img = _image(rng, 16, 16)
    v, _ = dssim_loss(img, img)
    assert abs(v) < 1e-12
    noisy = np.clip(img + rng.normal(scale=0.2, size=img.shape), 0, 1)
    v2, _ = dssim_loss(noisy, img)
    assert v2 > 0.01
    assert abs(v2 - (1.0 - ssim(noisy, img)) / 2.0) < 1e-12


def test_dssim_gradient_matches_finite_differences(rng):
    pred = _image(rng, 13, 12)
    target = _image(rng, 13, 12)
    _, grad = dssim_loss(pred, target)
    eps = 1e-6
    probes = [(3, 4, 0), (0, 0, 1), (12, 11, 2), (6, 2, 1), (9, 7, 0)]
    for (i, j, c) in probes:
        hi, lo = pred.copy(), pred.copy()
        hi[i, j, c] += eps
        lo[i, j, c] -= eps
        fd = (dssim_loss(hi, target)[0] - dssim_loss(lo, target)[0]) / (2 * eps)
        assert abs(grad[i, j, c] - fd) < 1e-7, (i, j, c)


def test_color_loss_is_weighted_mix(rng):
    pred, target = _image(rng, 16, 16), _image(rng, 16, 16)
    v, g = color_loss(pred, target, 0.2)
    v1, g1 = l1_loss(pred, target)
    v2, g2 = dssim_loss(pred, target)
    assert abs(v - (0.8 * v1 + 0.2 * v2)) < 1e-15
    assert np.allclose(g, 0.8 * g1 + 0.2 * g2, atol=1e-15)
    v_l1, _ = color_loss(pred, target, 0.0)
    assert v_l1 == v1


def test_depth_loss_mask_and_gradient(rng):
    h, w = 9, 7
    rendered = rng.uniform(0.5, 3.0, size=(h, w))
    target = rng.uniform(0.5, 3.0, size=(h, w))
    trans = rng.uniform(0.0, 1.0, size=(h, w))
    v, g = depth_loss(rendered, target, trans, threshold=0.5)
    mask = trans <= 0.5
    diff = rendered - target
    assert abs(v - np.abs(diff[mask]).mean()) < 1e-15
    assert np.all(g[~mask] == 0.0)
    assert np.allclose(g[mask], np.sign(diff[mask]) / mask.sum())
    # all-background image contributes nothing
    v0, g0 = depth_loss(rendered, target, np.ones((h, w)))
    assert v0 == 0.0 and np.all(g0 == 0.0)


def test_flow_loss_epe_and_gradient(rng):
    pred = rng.normal(size=(6, 5, 2))
    target = rng.normal(size=(6, 5, 2))
    v, g = flow_loss(pred, target)
    d = pred - target
    want = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2 + 1e-16).mean()
    assert abs(v - want) < 1e-15
    eps = 1e-7
    for (i, j, c) in [(0, 0, 0), (3, 2, 1), (5, 4, 0)]:
        hi, lo = pred.copy(), pred.copy()
        hi[i, j, c] += eps
        lo[i, j, c] -= eps
        fd = (flow_loss(hi, target)[0] - flow_loss(lo, target)[0]) / (2 * eps)
        assert abs(g[i, j, c] - fd) < 1e-6


def test_flow_loss_finite_at_exact_match(rng):
    pred = rng.normal(size=(4, 4, 2))
    v, g = flow_loss(pred, pred.copy())
    assert np.isfinite(v) and np.all(np.isfinite(g))


def test_reg_loss_quadratic():
    v, g = reg_loss(np.array([0.1, -0.2, 0.0]))
    assert abs(v - (0.01 + 0.04)) < 1e-15
    assert np.allclose(g, [0.2, -0.4, 0.0])


def test_total_loss_weighted_sum():
    w = LossWeights(lambda_dssim=0.2, lambda_color=1.0, lambda_depth=1.0,
                    lambda_flow=1.0, lambda_reg=1e-4)
    br = total_loss(color=0.5, perceptual=9.0, depth=0.25, flow=0.125,
                    reg=2.0, weights=w)
    # perceptual is reserved with weight 0
    assert abs(br.total - (0.5 + 0.25 + 0.125 + 1e-4 * 2.0)) < 1e-15
    assert br.color == 0.5 and br.reg == 2.0


# ------------------------------------------------------------- color grid

def test_identity_grid_leaves_image_unchanged(rng):
    img = _image(rng)
    out = apply_color_grid(BilateralGrid.identity(), img)
    assert np.allclose(out, img, atol=1e-12)


def test_grid_constant_bias_cell_shifts_colors(rng):
    grid = BilateralGrid.identity(2, 2, 1)
    grid.cells[..., :, 3] += 0.25  # every cell gains a constant offset
    img = _image(rng)
    out = apply_color_grid(grid, img)
    assert np.allclose(out, img + 0.25, atol=1e-12)


def test_grid_local_cell_edit_is_spatially_local(rng):
    img = np.full((32, 32, 3), 0.5)
    grid = BilateralGrid.identity(8, 8, 4)
    grid.cells[0, 0, :, :, 3] += 0.3  # corner cell only
    out = apply_color_grid(grid, img)
    delta = np.abs(out - img).sum(axis=2)
    assert delta[0, 0] > 0.1           # near the edited corner
    assert delta[-1, -1] < 1e-12       # opposite corner untouched


def test_grid_backward_matches_finite_differences(rng):
    grid = BilateralGrid.identity(3, 3, 2)
    grid.cells += rng.normal(scale=0.05, size=grid.cells.shape)
    img = rng.uniform(0.1, 0.9, size=(8, 7, 3))
    d_out = rng.normal(size=(8, 7, 3))

    def forward(g, im):
        return float(np.sum(apply_color_grid(g, im) * d_out))

    d_img, d_cells = color_grid_backward(grid, img, d_out)
    eps = 1e-6
    for (i, j, c) in [(0, 0, 0), (4, 3, 1), (7, 6, 2), (2, 5, 0)]:
        hi, lo = img.copy(), img.copy()
        hi[i, j, c] += eps
        lo[i, j, c] -= eps
        fd = (forward(grid, hi) - forward(grid, lo)) / (2 * eps)
        assert abs(d_img[i, j, c] - fd) < 1e-5, (i, j, c)
    flat = d_cells.reshape(-1)
    idx = rng.choice(flat.size, size=8, replace=False)
    for k in idx:
        hi, lo = grid.copy(), grid.copy()
        hi.cells.reshape(-1)[k] += eps
        lo.cells.reshape(-1)[k] -= eps
        fd = (forward(hi, img) - forward(lo, img)) / (2 * eps)
        assert abs(flat[k] - fd) < 1e-6, k


def test_grid_is_identity_predicate():
    g = BilateralGrid.identity()
    assert g.is_identity()
    g.cells[1, 1, 1, 0, 3] = 1e-3
    assert not g.is_identity()


# -------------------------------------------------------- depth alignment

def test_align_depth_recovers_known_affine(rng):
    mono = rng.uniform(0.2, 2.0, size=(16, 14))
    a_true, b_true = 1.7, -0.3
    xs = rng.uniform(0, 13, size=12)
    ys = rng.uniform(0, 15, size=12)
    z = a_true * bilinear_sample(mono, xs, ys) + b_true
    a, b = align_depth(mono, np.stack([xs, ys, z], axis=1))
    assert abs(a - a_true) < 1e-9
    assert abs(b - b_true) < 1e-9


def test_align_depth_rejects_degenerate_inputs(rng):
    mono = rng.uniform(size=(8, 8))
    with pytest.raises(DepthAlignmentError):
        align_depth(mono, np.array([[1.0, 1.0, 2.0]]))  # one sample
    with pytest.raises(DepthAlignmentError):
        align_depth(np.full((8, 8), 0.5),
                    np.array([[1.0, 1.0, 2.0], [3.0, 3.0, 2.5]]))


def test_bilinear_sample_matches_hand_interpolation():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(img, 0.5, 0.5) == pytest.approx(1.5)
    assert bilinear_sample(img, 1.0, 0.0) == pytest.approx(1.0)
    # clamped outside the image
    assert bilinear_sample(img, -5.0, 0.0) == pytest.approx(0.0)
    assert bilinear_sample(img, 5.0, 5.0) == pytest.approx(3.0)
