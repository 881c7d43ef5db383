"""Training objective: L1 + D-SSIM on exposure-compensated renders, with
exact hand-derived gradients for the rendered image and the exposure matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PAD = SSIM_WINDOW // 2


@dataclass
class ExposureAffine:
    """3x4 color transform: left 3x3 scales RGB, last column offsets."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 4)

    @staticmethod
    def identity() -> "ExposureAffine":
        return ExposureAffine(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))


def apply_exposure(E: ExposureAffine, color_image: np.ndarray) -> np.ndarray:
    """Per pixel out = M rgb + b. No clamping; the loss sees unclamped values."""
    dt = color_image.dtype
    M = E.matrix[:, :3].astype(dt)
    b = E.matrix[:, 3].astype(dt)
    return color_image @ M.T + b


def _gauss_kernel(dtype):
    xs = np.arange(SSIM_WINDOW, dtype=np.float64) - PAD
    k = np.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return (k / k.sum()).astype(dtype)


def _pad_reflect(img):
    return np.pad(img, PAD, mode="reflect")


def _pad_adjoint_index(h, w):
    idx = np.pad(np.arange(h * w).reshape(h, w), PAD, mode="reflect")
    return idx.ravel()


def _conv_valid(xp, k):
    """Separable 'valid' convolution of a padded 2D array back to (H, W)."""
    hp, wp = xp.shape
    h = hp - 2 * PAD
    w = wp - 2 * PAD
    tmp = np.zeros((h, wp), dtype=xp.dtype)
    for a in range(SSIM_WINDOW):
        tmp += k[a] * xp[a:a + h, :]
    out = np.zeros((h, w), dtype=xp.dtype)
    for b in range(SSIM_WINDOW):
        out += k[b] * tmp[:, b:b + w]
    return out


def _conv_valid_adjoint(dout, k):
    """Adjoint of _conv_valid: (H, W) cotangent -> padded cotangent."""
    h, w = dout.shape
    wp = w + 2 * PAD
    dtmp = np.zeros((h, wp), dtype=dout.dtype)
    for b in range(SSIM_WINDOW):
        dtmp[:, b:b + w] += k[b] * dout
    dxp = np.zeros((h + 2 * PAD, wp), dtype=dout.dtype)
    for a in range(SSIM_WINDOW):
        dxp[a:a + h, :] += k[a] * dtmp
    return dxp


def ssim_forward(x: np.ndarray, y: np.ndarray):
    """Mean SSIM of two (H, W, C) images plus the state the backward needs."""
    dt = x.dtype
    k = _gauss_kernel(dt)
    c1, c2 = dt.type(SSIM_C1), dt.type(SSIM_C2)
    state = []
    total = dt.type(0)
    channels = x.shape[2]
    for c in range(channels):
        xp = _pad_reflect(x[:, :, c])
        yp = _pad_reflect(y[:, :, c].astype(dt, copy=False))
        mu_x = _conv_valid(xp, k)
        mu_y = _conv_valid(yp, k)
        sxx = _conv_valid(xp * xp, k) - mu_x * mu_x
        syy = _conv_valid(yp * yp, k) - mu_y * mu_y
        sxy = _conv_valid(xp * yp, k) - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + c1
        a2 = 2 * sxy + c2
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        b2 = sxx + syy + c2
        s = (a1 * a2) / (b1 * b2)
        total = total + s.mean(dtype=dt)
        state.append((xp, yp, mu_x, mu_y, a1, a2, b1, b2, s))
    return total / dt.type(channels), state


def ssim_backward(state, d_ssim: float, shape):
    """Gradient of mean SSIM w.r.t. x, given the forward state."""
    h, w, channels = shape
    xp0 = state[0][0]
    dt = xp0.dtype
    k = _gauss_kernel(dt)
    pad_idx = _pad_adjoint_index(h, w)
    dx = np.zeros((h, w, channels), dtype=dt)
    coeff = dt.type(d_ssim) / dt.type(channels * h * w)
    for c in range(channels):
        xp, yp, mu_x, mu_y, a1, a2, b1, b2, s = state[c]
        ds = np.full((h, w), coeff, dtype=dt)
        denom = b1 * b2
        da1 = ds * a2 / denom
        da2 = ds * a1 / denom
        db1 = -ds * s / b1
        db2 = -ds * s / b2
        dmu_x = 2 * mu_y * da1 + 2 * mu_x * db1
        dsxy = 2 * da2
        dsxx = db2
        dmu_x += -2 * mu_x * dsxx - mu_y * dsxy
        dxp = _conv_valid_adjoint(dmu_x, k)
        dxp += 2 * xp * _conv_valid_adjoint(dsxx, k)
        dxp += yp * _conv_valid_adjoint(dsxy, k)
        flat = np.zeros(h * w, dtype=dt)
        np.add.at(flat, pad_idx, dxp.ravel())
        dx[:, :, c] = flat.reshape(h, w)
    return dx


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Metric-only mean SSIM of two (H, W, C) float images."""
    value, _ = ssim_forward(np.asarray(x), np.asarray(y))
    return float(value)


def photometric_loss(rendered: np.ndarray, ground_truth: np.ndarray,
                     E: ExposureAffine, lam: float = 0.2):
    """L = (1 - lam) * mean|E[C] - gt|_1 + lam * (1 - SSIM(E[C], gt)) / 2.

    Returns (loss, d_rendered, d_E, parts) with exact gradients; ``parts``
    carries the separate L1 and D-SSIM terms for logging.
    """
    if rendered.shape != ground_truth.shape:
        raise ValueError(
            f"shape mismatch: rendered {rendered.shape} vs gt {ground_truth.shape}")
    dt = rendered.dtype
    lam = dt.type(lam)
    h, w, channels = rendered.shape
    n = dt.type(h * w * channels)

    M = E.matrix[:, :3].astype(dt)
    Y = rendered @ M.T + E.matrix[:, 3].astype(dt)
    gt = ground_truth.astype(dt, copy=False)

    diff = Y - gt
    l1 = np.abs(diff).mean(dtype=dt)
    dY = (1 - lam) * np.sign(diff) / n

    ssim_val, state = ssim_forward(Y, gt)
    dssim = (1 - ssim_val) / dt.type(2)
    dY = dY + ssim_backward(state, -float(lam) / 2.0, (h, w, channels))

    loss = (1 - lam) * l1 + lam * dssim

    d_rendered = dY @ M
    dM = np.einsum("hwc,hwk->ck", dY, rendered)
    db = dY.sum(axis=(0, 1))
    d_E = np.concatenate([dM, db[:, None]], axis=1)
    parts = {"l1": float(l1), "dssim": float(dssim), "ssim": float(ssim_val)}
    return float(loss), d_rendered, d_E, parts
