"""Image metrics and the splat-branch training loss.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2 on unit
dynamic range, per channel then averaged. The mean is taken over fully
interior windows (valid mode) so constant-image closed forms hold exactly and
the adjoint used by the analytic gradient is a plain zero-padded convolution
with the same symmetric kernel.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(r**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_K = _window()
_PAD = SSIM_WINDOW // 2


def _filt_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation, fully interior windows only."""
    y = correlate1d(x, _K, axis=0, mode="constant")
    y = correlate1d(y, _K, axis=1, mode="constant")
    return y[_PAD:-_PAD, _PAD:-_PAD]


def _filt_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _filt_valid (symmetric kernel: zero-pad then correlate)."""
    full = np.zeros(shape, dtype=np.float64)
    full[_PAD:-_PAD, _PAD:-_PAD] = g
    y = correlate1d(full, _K, axis=0, mode="constant")
    return correlate1d(y, _K, axis=1, mode="constant")


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")


def _ssim_channel(x, y, want_grad):
    mu1 = _filt_valid(x)
    mu2 = _filt_valid(y)
    s11 = _filt_valid(x * x) - mu1 * mu1
    s22 = _filt_valid(y * y) - mu2 * mu2
    s12 = _filt_valid(x * y) - mu1 * mu2
    A1 = 2 * mu1 * mu2 + C1
    A2 = 2 * s12 + C2
    B1 = mu1 * mu1 + mu2 * mu2 + C1
    B2 = s11 + s22 + C2
    smap = (A1 * A2) / (B1 * B2)
    if not want_grad:
        return smap.mean(), None
    # gradient of mean(smap) w.r.t. x
    n = smap.size
    dA1 = A2 / (B1 * B2) / n
    dA2 = A1 / (B1 * B2) / n
    dB1 = -smap / B1 / n
    dB2 = -smap / B2 / n
    dmu1 = 2 * mu2 * dA1 + 2 * mu1 * dB1 - 2 * mu2 * dA2 - 2 * mu1 * dB2
    dWxx = dB2
    dWxy = 2 * dA2
    gx = (
        _filt_adjoint(dmu1, x.shape)
        + 2 * x * _filt_adjoint(dWxx, x.shape)
        + y * _filt_adjoint(dWxy, x.shape)
    )
    return smap.mean(), gx


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity in [-1, 1], per channel then averaged."""
    _check_pair(a, b)
    a = np.atleast_3d(a)
    b = np.atleast_3d(b)
    vals = [_ssim_channel(a[:, :, c], b[:, :, c], False)[0] for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_and_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """(ssim value, d ssim / d a)."""
    _check_pair(a, b)
    a3 = np.atleast_3d(a)
    b3 = np.atleast_3d(b)
    grad = np.zeros_like(a3)
    vals = []
    nch = a3.shape[2]
    for c in range(nch):
        v, g = _ssim_channel(a3[:, :, c], b3[:, :, c], True)
        vals.append(v)
        grad[:, :, c] = g / nch
    return float(np.mean(vals)), grad.reshape(a.shape)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """10 log10(1/MSE) on [0,1] images, capped for exact matches."""
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_loss(render: np.ndarray, gt: np.ndarray, lam: float) -> float:
    """(1-lam) * mean L1 + lam * (1 - ssim)."""
    _check_pair(render, gt)
    return float((1.0 - lam) * np.mean(np.abs(render - gt)) + lam * (1.0 - ssim(render, gt)))


def gaussian_loss_and_grad(
    render: np.ndarray, gt: np.ndarray, lam: float
) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient w.r.t. the rendered image."""
    _check_pair(render, gt)
    diff = render - gt
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim_and_grad(render, gt)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    grad = (1.0 - lam) * g_l1 - lam * g_s
    return value, grad
