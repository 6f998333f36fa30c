"""PSNR / SSIM on RGB or Y channels, plus the per-frame metrics CSV."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .degrade import rgb_to_y

CSV_FIELDS = ["clip", "frame", "psnr_db", "ssim", "channel_mode", "crop_border"]


@dataclass(frozen=True)
class EvalConfig:
    channel: str = "rgb"
    crop_border: int = 0

    def __post_init__(self):
        if self.channel not in ("rgb", "y"):
            raise ValueError(f"channel must be 'rgb' or 'y', got {self.channel!r}")
        if self.crop_border < 0:
            raise ValueError("crop_border must be non-negative")


def _prepare(img, config):
    """(3, H, W) float image in [0, 1] -> (C, H', W') float64 on 0..255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    h, w = img.shape[1:]
    b = config.crop_border
    if 2 * b >= min(h, w):
        raise ValueError(f"crop_border {b} too large for {h}x{w}")
    if config.channel == "y":
        img = rgb_to_y(img)[None]
    if b:
        img = img[:, b:h - b, b:w - b]
    return img * 255.0


def psnr(x, y, config=EvalConfig()):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = _prepare(x, config)
    b = _prepare(y, config)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size=11, sigma=1.5):
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="nearest"), g, axis=1, mode="nearest")
    return out[r:-r, r:-r]


def _ssim_plane(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, peak=255.0):
    if min(a.shape) < size:
        raise ValueError(f"image {a.shape} smaller than the {size}x{size} SSIM window")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    g = gaussian_window(size, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x, y, config=EvalConfig()):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    In RGB mode the score is the mean of the three per-channel scores.
    """
    a = _prepare(x, config)
    b = _prepare(y, config)
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean([_ssim_plane(pa, pb) for pa, pb in zip(a, b)]))


def format_value(v):
    return "inf" if math.isinf(v) else f"{v:.6f}"


def write_metrics_csv(path, rows):
    """``rows`` are dicts keyed by :data:`CSV_FIELDS`."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["psnr_db"] = format_value(row["psnr_db"])
            out["ssim"] = format_value(row["ssim"])
            writer.writerow(out)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["frame"] = int(row["frame"])
        row["psnr_db"] = float(row["psnr_db"])
        row["ssim"] = float(row["ssim"])
        row["crop_border"] = int(row["crop_border"])
    return rows
