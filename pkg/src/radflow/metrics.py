"""Image/depth quality and uncertainty-calibration metrics.

Depth metrics follow the disparity convention (errors computed on 1/depth).
Sparsification curves rank pixels by uncertainty and by actual error,
remove the top t% under each ranking, and track the retained mean error;
the area between the two normalized curves (AUSE) is zero when the
uncertainty ranks errors perfectly and grows as the ranking degrades.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .objective import kde_loglik

DELTA_TAU = 1.25
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel1d(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    out = sliding_window_view(img, len(kern), axis=1) @ kern
    out = sliding_window_view(out, len(kern), axis=0) @ kern
    return out


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean windowed SSIM (11x11 Gaussian, sigma 1.5) on grayscale.

    Color inputs are converted by channel mean; only fully valid windows
    contribute.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 3:
        pred = pred.mean(axis=-1)
        gt = gt.mean(axis=-1)
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = _gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    mu1 = _filter_valid(pred, k)
    mu2 = _filter_valid(gt, k)
    var1 = _filter_valid(pred * pred, k) - mu1 * mu1
    var2 = _filter_valid(gt * gt, k) - mu2 * mu2
    cov = _filter_valid(pred * gt, k) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (var1 + var2 + SSIM_C2)
    return float(np.mean(num / den))


def depth_errors(
    pred_disparity: np.ndarray, gt_disparity: np.ndarray, mask: np.ndarray
) -> tuple[float, float, float, float, float]:
    """(rmse, mae, delta1, delta2, delta3) over masked disparity pixels.

    delta_k is the fraction of pixels with max(pred/gt, gt/pred) below
    1.25^k; the ratio is scale-free, so it is identical on depth and
    disparity.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask in depth_errors")
    p = np.asarray(pred_disparity, dtype=np.float64)[mask]
    g = np.asarray(gt_disparity, dtype=np.float64)[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("disparities must be positive where mask is set")
    diff = p - g
    rmse = float(np.sqrt(np.mean(diff**2)))
    mae = float(np.mean(np.abs(diff)))
    ratio = np.maximum(p / g, g / p)
    deltas = tuple(float(np.mean(ratio < DELTA_TAU**k)) for k in (1, 2, 3))
    return (rmse, mae) + deltas


def nll_metric(gt: np.ndarray, samples: np.ndarray, bandwidth: float) -> float:
    """Mean negative KDE log-likelihood of ground truth under the samples.

    Uses the training kernel verbatim (same function, same op order), so
    metric and objective agree bit-exactly on shared inputs.
    """
    ll = kde_loglik(np.asarray(gt, dtype=np.float64), np.asarray(samples, dtype=np.float64), bandwidth)
    return float(np.mean(ll)) * -1.0


@dataclass
class SparsificationCurve:
    """Retained mean error vs fraction removed, under two orderings."""

    t_percent: np.ndarray  # 0..100
    by_uncertainty: np.ndarray  # normalized by the t=0 mean error
    by_error: np.ndarray  # oracle curve, same normalization

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t_percent", "uncertainty_curve", "oracle_curve"])
            for t, u, o in zip(self.t_percent, self.by_uncertainty, self.by_error):
                writer.writerow([int(t), repr(float(u)), repr(float(o))])


def _retained_means(errors: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Mean of retained errors after removing the first k of `order`, k=0..n-1."""
    n = len(errors)
    sorted_desc = errors[order]
    suffix_sums = np.concatenate([np.cumsum(sorted_desc[::-1])[::-1], [0.0]])
    counts = n - np.arange(n + 1)
    means = np.zeros(n + 1)
    means[:-1] = suffix_sums[:-1] / counts[:-1]
    return means  # index k = mean after removing k items (k=n -> 0, unused)


def sparsification(
    errors: np.ndarray, uncertainties: np.ndarray
) -> tuple[SparsificationCurve, float]:
    """Sparsification curves and their area gap (AUSE).

    Pixels are removed in descending order (ties broken by pixel index for
    determinism); at each t in {0..100}% the retained-mean error is
    recorded, at least one pixel always retained. Curves are normalized by
    the t=0 mean so AUSE is scale-free; an all-zero error vector has AUSE 0
    by definition.
    """
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    uncertainties = np.asarray(uncertainties, dtype=np.float64).reshape(-1)
    if errors.shape != uncertainties.shape:
        raise ValueError("errors and uncertainties length mismatch")
    n = errors.size
    if n < 2:
        raise ValueError("need at least two pixels")
    t = np.arange(101)
    base = float(errors.mean())
    if base == 0.0:
        flat = np.zeros(101)
        return SparsificationCurve(t, flat, flat), 0.0
    order_u = np.argsort(-uncertainties, kind="stable")
    order_e = np.argsort(-errors, kind="stable")
    means_u = _retained_means(errors, order_u)
    means_e = _retained_means(errors, order_e)
    removed = np.minimum((t * n) // 100, n - 1)
    curve_u = means_u[removed] / base
    curve_e = means_e[removed] / base
    ause = float(np.trapezoid(np.abs(curve_u - curve_e), t) / 100.0)
    return SparsificationCurve(t, curve_u, curve_e), ause


@dataclass
class ViewMetrics:
    name: str
    psnr: float
    ssim: float
    nll: float
    depth_rmse: float
    depth_mae: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    rmse: float
    mae: float
    delta1: float
    delta2: float
    delta3: float
    nll: float
    ause_rmse: float
    ause_mae: float
    depth_ause_rmse: float
    depth_ause_mae: float
    bandwidth: float
    notes: dict = dataclass_field(default_factory=dict)
    per_view: list[ViewMetrics] = dataclass_field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "per_view"}
        d["per_view"] = [v.to_dict() for v in self.per_view]
        return d
