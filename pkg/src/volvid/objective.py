"""Supervision terms and image metrics.

Everything here operates on float64 numpy images in [0, 1] (HxWx3) or maps
(HxW). Each loss returns its value together with the gradient w.r.t. the
predicted input so the training loop can chain into the rasterizer backward.

The bilateral color grid is a low-resolution lattice of affine color
transforms indexed by image position and luminance; it absorbs per-camera
photometric drift so the primitives converge to a shared radiometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
EPE_EPSILON = 1.0e-8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class DepthAlignmentError(ValueError):
    """Raised when the affine depth fit is underdetermined."""


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_color: float = 1.0
    lambda_perceptual: float = 0.0  # reserved; perceptual term not computed
    lambda_depth: float = 1.0
    lambda_flow: float = 1.0
    lambda_reg: float = 1.0e-4
    depth_mask_threshold: float = 0.5


@dataclass
class BilateralGrid:
    """Per-camera lattice of 3x4 affine color transforms.

    cells has shape (grid_w, grid_h, grid_d, 3, 4); a cell maps rgb to
    A @ rgb + b. Lookup coordinates: (x / W * (grid_w - 1),
    y / H * (grid_h - 1), luminance * (grid_d - 1)), trilinearly
    interpolated. Identity initialization leaves images untouched.
    """

    cells: np.ndarray
    cam_id: str = ""

    @staticmethod
    def identity(grid_w: int = 8, grid_h: int = 8, grid_d: int = 4,
                 cam_id: str = "") -> "BilateralGrid":
        cells = np.zeros((grid_w, grid_h, grid_d, 3, 4))
        cells[..., :3, :3] = np.eye(3)
        return BilateralGrid(cells=cells, cam_id=cam_id)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.cells.shape[0], self.cells.shape[1], self.cells.shape[2]

    def is_identity(self, atol: float = 0.0) -> bool:
        ident = BilateralGrid.identity(*self.dims).cells
        return bool(np.allclose(self.cells, ident, atol=atol, rtol=0.0))

    def copy(self) -> "BilateralGrid":
        return BilateralGrid(cells=self.cells.copy(), cam_id=self.cam_id)


def _grid_lookup(grid: BilateralGrid, image: np.ndarray):
    """Shared corner indices/weights for apply and backward."""
    h, w = image.shape[:2]
    gw, gh, gd = grid.dims
    xs = np.arange(w) / w * (gw - 1)
    ys = np.arange(h) / h * (gh - 1)
    lum = image @ LUMA_WEIGHTS
    gz = np.clip(lum * (gd - 1), 0.0, gd - 1)

    gx = np.broadcast_to(xs[None, :], (h, w))
    gy = np.broadcast_to(ys[:, None], (h, w))
    ix = np.minimum(gx.astype(int), gw - 2) if gw > 1 else np.zeros((h, w), int)
    iy = np.minimum(gy.astype(int), gh - 2) if gh > 1 else np.zeros((h, w), int)
    iz = np.minimum(gz.astype(int), gd - 2) if gd > 1 else np.zeros((h, w), int)
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    return ix, iy, iz, fx, fy, fz


def apply_color_grid(grid: BilateralGrid, image: np.ndarray) -> np.ndarray:
    """Color-correct an image through the trilinearly interpolated lattice."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be HxWx3")
    ix, iy, iz, fx, fy, fz = _grid_lookup(grid, image)
    gw, gh, gd = grid.dims
    out = np.zeros_like(image)
    hom = np.concatenate([image, np.ones(image.shape[:2] + (1,))], axis=2)
    for dx in (0, 1):
        wx = (1.0 - fx) if dx == 0 else fx
        for dy in (0, 1):
            wy = (1.0 - fy) if dy == 0 else fy
            for dz in (0, 1):
                wz = (1.0 - fz) if dz == 0 else fz
                # clamped corners only ever carry weight 0
                cell = grid.cells[np.minimum(ix + dx, gw - 1),
                                  np.minimum(iy + dy, gh - 1),
                                  np.minimum(iz + dz, gd - 1)]  # (H, W, 3, 4)
                val = np.einsum("hwrc,hwc->hwr", cell, hom)
                out += (wx * wy * wz)[:, :, None] * val
    return out


def color_grid_backward(grid: BilateralGrid, image: np.ndarray,
                        d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of apply_color_grid: (d image, d cells).

    The luminance-dependent lookup makes the transform itself a function of
    the input pixel, so d image carries both the interpolated linear map and
    the derivative of the interpolation weights along the luminance axis.
    """
    ix, iy, iz, fx, fy, fz = _grid_lookup(grid, image)
    h, w = image.shape[:2]
    gw, gh, gd = grid.dims
    hom = np.concatenate([image, np.ones((h, w, 1))], axis=2)
    d_image = np.zeros_like(image)
    d_cells = np.zeros_like(grid.cells)
    lum = image @ LUMA_WEIGHTS
    # gz clamping kills the luminance path outside [0, 1].
    lum_live = ((lum * (gd - 1) > 0.0) & (lum * (gd - 1) < gd - 1)).astype(float)
    d_gz = np.zeros((h, w))

    for dx in (0, 1):
        wx = (1.0 - fx) if dx == 0 else fx
        for dy in (0, 1):
            wy = (1.0 - fy) if dy == 0 else fy
            for dz in (0, 1):
                wz = (1.0 - fz) if dz == 0 else fz
                sz = -1.0 if dz == 0 else 1.0
                jx = np.minimum(ix + dx, gw - 1)
                jy = np.minimum(iy + dy, gh - 1)
                jz = np.minimum(iz + dz, gd - 1)
                cell = grid.cells[jx, jy, jz]
                weight = wx * wy * wz
                # d image via the linear map of each corner.
                d_image += weight[:, :, None] * np.einsum(
                    "hwrc,hwr->hwc", cell[:, :, :, :3], d_out)
                # d image via the luminance-dependent weight.
                val = np.einsum("hwrc,hwc->hwr", cell, hom)
                d_gz += (wx * wy * sz) * np.einsum("hwr,hwr->hw", d_out, val)
                # d cells: scatter the outer product onto the corner.
                contrib = (weight[:, :, None, None]
                           * d_out[:, :, :, None] * hom[:, :, None, :])
                lin = (jx * gh + jy) * gd + jz
                np.add.at(d_cells.reshape(-1, 3, 4), lin.reshape(-1),
                          contrib.reshape(-1, 3, 4))
    d_image += (d_gz * lum_live * (gd - 1))[:, :, None] * LUMA_WEIGHTS[None, None, :]
    return d_image, d_cells


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation (window fully inside the image)."""
    k = kernel.size
    h, w = img.shape
    tmp = np.zeros((h, w - k + 1))
    for i in range(k):
        tmp += kernel[i] * img[:, i:w - k + 1 + i]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += kernel[i] * tmp[i:h - k + 1 + i, :]
    return out


def _filter_adjoint(g: np.ndarray, kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _filter_valid back to an image of the given shape."""
    k = kernel.size
    pad = np.zeros((g.shape[0] + 2 * (k - 1), g.shape[1] + 2 * (k - 1)))
    pad[k - 1:k - 1 + g.shape[0], k - 1:k - 1 + g.shape[1]] = g
    out = _filter_valid(pad, kernel[::-1])
    assert out.shape == shape
    return out


def _ssim_stats(a: np.ndarray, b: np.ndarray, kernel: np.ndarray):
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    e_a2 = _filter_valid(a * a, kernel)
    e_b2 = _filter_valid(b * b, kernel)
    e_ab = _filter_valid(a * b, kernel)
    var_a = e_a2 - mu_a * mu_a
    var_b = e_b2 - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity; 11x11 Gaussian window, sigma 1.5.

    Maps are computed where the window fits entirely inside the image and
    averaged over that region and over channels. Images must be HxWx3 with
    both sides at least the window size.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("images must be HxWx3")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}px ssim window")
    kernel = _gaussian_kernel()
    total = 0.0
    for ch in range(3):
        _, _, n1, n2, d1, d2 = _ssim_stats(a[:, :, ch], b[:, :, ch], kernel)
        total += float(np.mean(n1 * n2 / (d1 * d2)))
    return total / 3.0


def dssim_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """(1 - ssim) / 2 with the analytic gradient w.r.t. pred."""
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError("pred/target must be matching HxWx3 images")
    kernel = _gaussian_kernel()
    h, w = pred.shape[:2]
    grad = np.zeros_like(pred)
    total = 0.0
    count = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1) * 3
    for ch in range(3):
        a = pred[:, :, ch]
        b = target[:, :, ch]
        mu_a, mu_b, n1, n2, d1, d2 = _ssim_stats(a, b, kernel)
        s = n1 * n2 / (d1 * d2)
        total += float(s.sum())
        # Partials w.r.t. the filtered fields mu_a, E[a^2], E[ab].
        g_cov = 2.0 * n1 / (d1 * d2)
        g_var = -s / d2
        g_mu = (2.0 * mu_b * n2 / (d1 * d2) - 2.0 * mu_a * s / d1
                + g_var * (-2.0 * mu_a) + g_cov * (-mu_b))
        scale = -0.5 / count  # d dssim / d ssim_map value
        g_mu_img = _filter_adjoint(g_mu * scale, kernel, (h, w))
        g_a2_img = _filter_adjoint(g_var * scale, kernel, (h, w))
        g_ab_img = _filter_adjoint(g_cov * scale, kernel, (h, w))
        grad[:, :, ch] = g_mu_img + 2.0 * a * g_a2_img + b * g_ab_img
    value = (1.0 - total / count) / 2.0
    return value, grad


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


def color_loss(pred: np.ndarray, target: np.ndarray,
               lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - w) * L1 + w * DSSIM on color-corrected images."""
    v1, g1 = l1_loss(pred, target)
    if lambda_dssim == 0.0:
        return v1, g1
    v2, g2 = dssim_loss(pred, target)
    return (1.0 - lambda_dssim) * v1 + lambda_dssim * v2, \
        (1.0 - lambda_dssim) * g1 + lambda_dssim * g2


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample a map at fractional pixel coordinates with edge clamping."""
    h, w = img.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(x.astype(int), w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.minimum(y.astype(int), h - 2) if h > 1 else np.zeros_like(y, int)
    fx = x - x0
    fy = y - y0
    p00 = img[y0, x0]
    p01 = img[y0, np.minimum(x0 + 1, w - 1)]
    p10 = img[np.minimum(y0 + 1, h - 1), x0]
    p11 = img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    return (p00 * (1 - fx) * (1 - fy) + p01 * fx * (1 - fy)
            + p10 * (1 - fx) * fy + p11 * fx * fy)


def align_depth(mono_depth: np.ndarray,
                sparse_samples: np.ndarray) -> tuple[float, float]:
    """Least-squares affine fit of a relative depth map to metric anchors.

    :param mono_depth: (H, W) relative depth prediction.
    :param sparse_samples: (M, 3) rows of (x, y, metric_depth).
    :return: (a, b) so that a * mono_depth + b approximates metric depth.
    :raises DepthAlignmentError: fewer than 2 samples or constant predictions.
    """
    samples = np.asarray(sparse_samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 3 or samples.shape[0] < 2:
        raise DepthAlignmentError("need at least 2 sparse depth samples")
    d = bilinear_sample(mono_depth, samples[:, 0], samples[:, 1])
    z = samples[:, 2]
    var = float(np.var(d))
    if var < 1e-18:
        raise DepthAlignmentError("sampled mono depths are constant; fit is degenerate")
    a = float(np.cov(d, z, bias=True)[0, 1] / var)
    b = float(z.mean() - a * d.mean())
    return a, b


def depth_loss(rendered: np.ndarray, aligned_target: np.ndarray,
               transmittance: np.ndarray,
               threshold: float = 0.5) -> tuple[float, np.ndarray]:
    """Masked L1 on depth; pixels that mostly see background are excluded."""
    if rendered.shape != aligned_target.shape or rendered.shape != transmittance.shape:
        raise ValueError("depth maps and transmittance must share one shape")
    mask = transmittance <= threshold
    grad = np.zeros_like(rendered)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    diff = rendered - aligned_target
    grad[mask] = np.sign(diff[mask]) / count
    return float(np.abs(diff[mask]).mean()), grad


def flow_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean endpoint error with a small epsilon inside the square root."""
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError("flows must be matching HxWx2 maps")
    diff = pred - target
    mag = np.sqrt(diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2 + EPE_EPSILON ** 2)
    n = pred.shape[0] * pred.shape[1]
    grad = diff / mag[:, :, None] / n
    return float(mag.mean()), grad


def reg_loss(offsets: np.ndarray) -> tuple[float, np.ndarray]:
    """Quadratic penalty on the per-camera temporal offsets."""
    offsets = np.asarray(offsets, dtype=np.float64)
    return float(np.sum(offsets * offsets)), 2.0 * offsets


@dataclass
class LossBreakdown:
    color: float = 0.0
    perceptual: float = 0.0
    depth: float = 0.0
    flow: float = 0.0
    reg: float = 0.0
    total: float = 0.0


def total_loss(color: float, perceptual: float, depth: float, flow: float,
               reg: float, weights: LossWeights | None = None) -> LossBreakdown:
    w = weights or LossWeights()
    total = (w.lambda_color * color + w.lambda_perceptual * perceptual
             + w.lambda_depth * depth + w.lambda_flow * flow + w.lambda_reg * reg)
    return LossBreakdown(color=color, perceptual=perceptual, depth=depth,
                         flow=flow, reg=reg, total=total)


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-exact pairs."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(peak * peak / mse))
