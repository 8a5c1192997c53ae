"""Image quality and rate-savings metrics."""

import numpy as np
from scipy.ndimage import correlate1d

PSNR_INF = float("inf")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``inf``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def _blur(img, w):
    return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def ssim(a, b, k1=0.01, k2=0.03, win=11, sigma=1.5) -> float:
    """Mean SSIM over channels with a Gaussian window (borders of half a window cropped)."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    w = _gaussian_window(win, sigma)
    pad = (win - 1) // 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, w), _blur(y, w)
        vx = _blur(x * x, w) - mx * mx
        vy = _blur(y * y, w) - my * my
        cxy = _blur(x * y, w) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        scores.append(s[pad:s.shape[0] - pad, pad:s.shape[1] - pad].mean())
    return float(np.mean(scores))


def bd_rate(rate_a, psnr_a, rate_b, psnr_b) -> float:
    """Average rate change of curve B relative to curve A, in percent.

    Log-rate is fitted as a cubic in PSNR for each curve and the fits are
    integrated over the overlapping PSNR interval.
    """
    rate_a, psnr_a, rate_b, psnr_b = (np.asarray(v, dtype=np.float64) for v in (rate_a, psnr_a, rate_b, psnr_b))
    if min(len(rate_a), len(rate_b)) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    if np.any(rate_a <= 0) or np.any(rate_b <= 0):
        raise ValueError("rates must be positive")
    fit_a = np.polyfit(psnr_a, np.log(rate_a), 3)
    fit_b = np.polyfit(psnr_b, np.log(rate_b), 3)
    lo = max(psnr_a.min(), psnr_b.min())
    hi = min(psnr_a.max(), psnr_b.max())
    if hi <= lo:
        raise ValueError("PSNR ranges do not overlap")
    int_a, int_b = np.polyint(fit_a), np.polyint(fit_b)
    avg_a = (np.polyval(int_a, hi) - np.polyval(int_a, lo)) / (hi - lo)
    avg_b = (np.polyval(int_b, hi) - np.polyval(int_b, lo)) / (hi - lo)
    return float((np.exp(avg_b - avg_a) - 1.0) * 100.0)


def rate_at_quality(rates, psnrs, target) -> float:
    """Rate an RD curve needs to reach ``target`` dB.

    Log-rate is linearly interpolated between the two measured points whose
    PSNR brackets ``target``; a target outside the measured range raises.
    """
    rates = np.asarray(rates, dtype=np.float64)
    psnrs = np.asarray(psnrs, dtype=np.float64)
    order = np.argsort(psnrs)
    p, r = psnrs[order], np.log(rates[order])
    if not p[0] <= target <= p[-1]:
        raise ValueError(f"target {target:.3f} dB outside measured range [{p[0]:.3f}, {p[-1]:.3f}]")
    return float(np.exp(np.interp(target, p, r)))
