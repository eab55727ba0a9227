"""SSIM / PSNR / MAE / MSE on [0, 1] images, whole-image and masked.

SSIM uses the usual 11x11 Gaussian window (sigma 1.5) with
``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2``, evaluated only at windows
that fit entirely inside the image; the score is the mean over windows.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import EmptyMask, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
WM_THRESHOLD = 0.2


@dataclass
class MetricReport:
    ssim: float
    psnr_db: float
    mae: float
    mse: float
    mask_label: str = "whole"
    n_subjects: int = 1

    def as_row(self):
        return asdict(self)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def gaussian_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _window_mean(x, g):
    r = len(g) // 2
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a, b, data_range=1.0):
    """Local SSIM at every fully-contained window position."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeMismatch(f"SSIM needs 2D images of side >= {SSIM_WINDOW}, got {a.shape}")
    g = gaussian_1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _window_mean(a, g), _window_mean(b, g)
    var_a = _window_mean(a * a, g) - mu_a * mu_a
    var_b = _window_mean(b * b, g) - mu_b * mu_b
    cov = _window_mean(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    return float(ssim_map(a, b, data_range).mean())


def mae(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def _psnr_from_mse(err, data_range=1.0):
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / err))


def psnr(a, b, data_range=1.0):
    """PSNR in dB; identical images give ``math.inf``."""
    return _psnr_from_mse(mse(a, b), data_range)


def image_metrics(pred, gt):
    return MetricReport(ssim(pred, gt), psnr(pred, gt), mae(pred, gt), mse(pred, gt), "whole", 1)


def masked_metrics(pred, gt, threshold=WM_THRESHOLD):
    """Metrics restricted to pixels where ``gt > threshold`` (white matter for FA).

    SSIM averages the local map over windows whose centre pixel is in the mask.
    """
    pred, gt = _pair(pred, gt)
    mask = gt > threshold
    if not mask.any():
        raise EmptyMask(f"no pixels with value > {threshold}")
    d = pred[mask] - gt[mask]
    err = float(np.mean(d ** 2))
    r = SSIM_WINDOW // 2
    centres = mask[r:mask.shape[0] - r, r:mask.shape[1] - r]
    smap = ssim_map(pred, gt)
    s = float(smap[centres].mean()) if centres.any() else math.nan
    return MetricReport(s, _psnr_from_mse(err), float(np.mean(np.abs(d))), err, "wm", 1)


def aggregate(reports, mask_label=None):
    """Mean over subjects. Infinite PSNR values are left out with a warning."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    psnrs = [r.psnr_db for r in reports if math.isfinite(r.psnr_db)]
    if len(psnrs) < len(reports):
        warnings.warn(f"{len(reports) - len(psnrs)} identical image pair(s) excluded from PSNR mean",
                      stacklevel=2)
    ssims = [r.ssim for r in reports if not math.isnan(r.ssim)]
    return MetricReport(
        ssim=float(np.mean(ssims)) if ssims else math.nan,
        psnr_db=float(np.mean(psnrs)) if psnrs else math.inf,
        mae=float(np.mean([r.mae for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
        mask_label=mask_label or reports[0].mask_label,
        n_subjects=sum(r.n_subjects for r in reports),
    )


METRIC_COLUMNS = ["method", "mask", "SSIM", "PSNR", "MAE", "MSE", "n_subjects"]


def _fmt(x):
    return "inf" if x == math.inf else f"{x:.12g}"


def write_metric_table(rows, path):
    """CSV with one line per ``(method, MetricReport)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for method, r in rows:
            w.writerow([method, r.mask_label, _fmt(r.ssim), _fmt(r.psnr_db), _fmt(r.mae),
                        _fmt(r.mse), r.n_subjects])
