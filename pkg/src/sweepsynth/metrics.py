"""Image quality metrics used for acceptance: PSNR and SSIM."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


class ImageTooSmall(ValueError):
    pass


@dataclass
class MetricReport:
    psnr: float
    ssim: float


def psnr(a, b, max_val=1.0):
    """10*log10(max^2 / MSE) over all samples; identical inputs report
    the documented 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_val * max_val / mse))


def _gaussian_taps(win=_SSIM_WIN, sigma=_SSIM_SIGMA):
    r = win // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _local_mean(x, taps):
    y = correlate1d(x, taps, axis=0, mode="constant")
    return correlate1d(y, taps, axis=1, mode="constant")


def ssim(a, b, max_val=1.0, win=_SSIM_WIN, sigma=_SSIM_SIGMA):
    """Gaussian-windowed SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03),
    computed per channel over fully interior windows and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    if min(h, w) < win:
        raise ImageTooSmall(f"image {w}x{h} smaller than the {win}x{win} window")
    taps = _gaussian_taps(win, sigma)
    r = win // 2
    c1 = (_K1 * max_val) ** 2
    c2 = (_K2 * max_val) ** 2
    vals = []
    for c in range(a.shape[2]):
        x = a[..., c]
        y = b[..., c]
        mx = _local_mean(x, taps)
        my = _local_mean(y, taps)
        mxx = _local_mean(x * x, taps)
        myy = _local_mean(y * y, taps)
        mxy = _local_mean(x * y, taps)
        sl = (slice(r, h - r), slice(r, w - r))
        mx, my = mx[sl], my[sl]
        vx = mxx[sl] - mx * mx
        vy = myy[sl] - my * my
        cxy = mxy[sl] - mx * my
        smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        vals.append(smap.mean())
    return float(np.mean(vals))


def report(a, b, max_val=1.0):
    return MetricReport(psnr=psnr(a, b, max_val), ssim=ssim(a, b, max_val))
