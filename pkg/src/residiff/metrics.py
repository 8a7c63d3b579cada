"""Image quality metrics: PSNR, SSIM, NMSE, and the sampling-SD summary.

All volume-level evaluation runs in the original [0, 1] intensity space;
`evaluate_volume` rejects inputs outside that range so normalized tensors
cannot leak into reported numbers. Volume metrics are the mean of
per-slice metrics over non-empty slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import DataError, ParameterError, ShapeError

__all__ = [
    "psnr",
    "ssim",
    "nmse",
    "sd_summary",
    "SliceMetrics",
    "MetricReport",
    "evaluate_volume",
]

# slices whose mean squared target intensity falls below this are skipped
EMPTY_SLICE_ENERGY = 1e-6


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} != target shape {t.shape}")
    return p, t


def psnr(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB: 10*log10(range^2 / MSE).

    Returns +inf when the images are identical (MSE == 0).
    """
    if data_range <= 0.0:
        raise ParameterError(f"data_range={data_range} must be positive")
    p, t = _check_pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g1, g1)
    return win / win.sum()


def ssim(
    pred: np.ndarray,
    target: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
    sigma: float = 1.5,
) -> float:
    """Mean local structural similarity with a Gaussian window.

    Local means/variances/covariance are Gaussian-weighted over `window`
    x `window` patches; the map is averaged over the valid (fully
    covered) region. Images must be at least window-sized.
    """
    p, t = _check_pair(pred, target)
    if p.ndim != 2:
        raise ShapeError(f"ssim expects 2-D images, got shape {p.shape}")
    if min(p.shape) < window:
        raise ShapeError(f"image {p.shape} smaller than the {window}x{window} window")
    win = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_p = convolve2d(p, win, mode="valid")
    mu_t = convolve2d(t, win, mode="valid")
    var_p = convolve2d(p * p, win, mode="valid") - mu_p**2
    var_t = convolve2d(t * t, win, mode="valid") - mu_t**2
    cov = convolve2d(p * t, win, mode="valid") - mu_p * mu_t
    num = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def nmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Normalized mean squared error: ||pred - target||^2 / ||target||^2."""
    p, t = _check_pair(pred, target)
    energy = float(np.sum(t**2))
    if energy == 0.0:
        raise DataError("nmse undefined for an identically zero target")
    return float(np.sum((p - t) ** 2)) / energy


def sd_summary(sd_volume: np.ndarray) -> float:
    """Scalar summary of a per-voxel standard-deviation volume (its mean)."""
    arr = np.asarray(sd_volume, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("empty SD volume")
    return float(arr.mean())


@dataclass(frozen=True)
class SliceMetrics:
    z: int
    psnr_db: float
    ssim: float
    nmse: float


@dataclass(frozen=True)
class MetricReport:
    """Volume-level metric summary with a per-slice breakdown."""

    psnr_db: float
    ssim: float
    nmse: float
    n_slices: int
    per_slice: tuple[SliceMetrics, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "ssim": self.ssim,
            "nmse": self.nmse,
            "n_slices": self.n_slices,
        }


def _check_unit_range(name: str, arr: np.ndarray) -> None:
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6):
        raise DataError(
            f"{name} must lie in [0, 1] for evaluation "
            f"(got range [{arr.min():.4g}, {arr.max():.4g}]); "
            "denormalize before computing metrics"
        )


def evaluate_volume(
    pred: np.ndarray, target: np.ndarray, data_range: float = 1.0
) -> MetricReport:
    """Slice-wise metrics for a reconstructed volume against its target.

    Both volumes must be [D,H,W] in the original [0, 1] intensity space.
    Slices whose target energy (mean squared intensity) does not exceed
    ``EMPTY_SLICE_ENERGY`` are excluded from the averages.
    """
    p, t = _check_pair(pred, target)
    if p.ndim != 3:
        raise ShapeError(f"expected [D,H,W] volumes, got shape {p.shape}")
    _check_unit_range("pred", p)
    _check_unit_range("target", t)
    per_slice = []
    for z in range(p.shape[0]):
        if float(np.mean(t[z] ** 2)) <= EMPTY_SLICE_ENERGY:
            continue
        per_slice.append(
            SliceMetrics(
                z=z,
                psnr_db=psnr(p[z], t[z], data_range),
                ssim=ssim(p[z], t[z], data_range=data_range),
                nmse=nmse(p[z], t[z]),
            )
        )
    if not per_slice:
        raise DataError("no non-empty slices to evaluate")
    return MetricReport(
        psnr_db=float(np.mean([s.psnr_db for s in per_slice])),
        ssim=float(np.mean([s.ssim for s in per_slice])),
        nmse=float(np.mean([s.nmse for s in per_slice])),
        n_slices=len(per_slice),
        per_slice=tuple(per_slice),
    )
