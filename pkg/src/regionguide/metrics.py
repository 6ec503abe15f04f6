"""Full-reference image quality metrics.

Images are ``[C, H, W]`` or ``[H, W]`` arrays. PSNR returns ``math.inf``
for identical inputs; :func:`format_value` turns that into ``"inf"`` for
reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import LUMA_WEIGHTS
from .errors import ConfigError, DimensionError, EmptyRegionError, SizeError

PSNR_INF = math.inf


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03


def _chw(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or min(a.shape) < 1:
        raise DimensionError(f"expected [C, H, W] or [H, W] image, got shape {a.shape}")
    return a


def _pair(a, b):
    a, b = _chw(a), _chw(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def to_luma(img):
    """``[3, H, W]`` to ``[1, H, W]`` with fixed BT.601 weights; single-channel passes through."""
    img = _chw(img)
    if img.shape[0] == 1:
        return img
    if img.shape[0] != 3:
        raise DimensionError(f"luma conversion needs 1 or 3 channels, got {img.shape[0]}")
    w = np.asarray(LUMA_WEIGHTS)
    return (w[0] * img[0] + w[1] * img[1] + w[2] * img[2])[None]


def psnr(a, b, max_val=1.0, color_space="rgb"):
    """Peak signal-to-noise ratio in dB, ``inf`` when the images are identical."""
    a, b = _pair(a, b)
    if color_space == "y":
        a, b = to_luma(a), to_luma(b)
    elif color_space != "rgb":
        raise ConfigError(f"unknown color space {color_space!r}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_val ** 2 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, max_val=1.0, params=SSIMParams()):
    """Local SSIM at every fully valid window position of a 2-D pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = params.window
    if a.shape[0] < n or a.shape[1] < n:
        raise SizeError(f"image {a.shape} smaller than the {n}x{n} window")
    win = gaussian_window(n, params.sigma)
    c1 = (params.k1 * max_val) ** 2
    c2 = (params.k2 * max_val) ** 2

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (n, n)), win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, max_val=1.0, params=SSIMParams()):
    """Mean Gaussian-weighted SSIM over valid windows; colour images go through luma first."""
    a, b = _pair(a, b)
    a, b = to_luma(a)[0], to_luma(b)[0]
    return float(np.mean(ssim_map(a, b, max_val, params)))


def region_metric(a, b, region, metric="psnr", max_val=1.0, params=SSIMParams()):
    """PSNR over masked pixels, or SSIM over windows lying fully inside the region."""
    a, b = _pair(a, b)
    m = np.asarray(region).astype(bool)
    if m.shape != a.shape[1:]:
        raise DimensionError(f"region {m.shape} vs image {a.shape[1:]}")
    if not m.any():
        raise EmptyRegionError("region has no pixels")
    if metric == "psnr":
        diff = (a - b)[:, m]
        mse = float(np.mean(diff ** 2))
        return PSNR_INF if mse == 0.0 else 10.0 * math.log10(max_val ** 2 / mse)
    if metric == "ssim":
        local = ssim_map(to_luma(a)[0], to_luma(b)[0], max_val, params)
        inside = sliding_window_view(m, (params.window, params.window)).all(axis=(2, 3))
        if not inside.any():
            raise EmptyRegionError("no SSIM window fits inside the region")
        return float(np.mean(local[inside]))
    raise ConfigError(f"unknown metric {metric!r}")


def format_value(v, digits=4):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return round(v, digits) if isinstance(v, float) else v


def format_table(rows, columns):
    """Left-aligned text table for a list of dicts."""
    cells = [[str(format_value(r.get(c, ""))) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
