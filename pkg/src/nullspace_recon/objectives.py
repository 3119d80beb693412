"""Training losses, image-quality metrics and the error/uncertainty analysis.

Losses take a batch along the first axis. Given torch tensors they return a
differentiable scalar tensor; given numpy arrays they return a
:class:`LossValue`.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .exceptions import StatisticsError, TrainingFault
from .validation import check_same_shape

LOG2 = math.log(2.0)
LOG_SCALE_BOUNDS = (-10.0, 10.0)


@dataclass
class LossValue:
    value: float
    residual: np.ndarray = field(repr=False)


def _as_tensors(*arrays):
    if all(torch.is_tensor(a) for a in arrays):
        return arrays, True
    return tuple(torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in arrays), False


def _check_batch(x_rec, x_true):
    if tuple(x_rec.shape) != tuple(x_true.shape):
        raise ValueError(f"shape mismatch {tuple(x_rec.shape)} vs {tuple(x_true.shape)}")
    if x_rec.ndim == 0 or x_rec.shape[0] == 0:
        raise ValueError("empty batch")


def mae_risk(x_rec, x_true):
    """Empirical risk ``(1/N) sum_i ||x_rec_i - x_i||_1``."""
    (x_rec, x_true), torch_in = _as_tensors(x_rec, x_true)
    _check_batch(x_rec, x_true)
    residual = x_rec - x_true
    value = residual.abs().sum() / x_rec.shape[0]
    if torch_in:
        return value
    return LossValue(float(value), residual.numpy())


def uncertainty_loss(x_rec, log_scale, x_true):
    """Laplace negative log-likelihood with per-pixel scale ``exp(log_scale)``.

    ``(1/N) sum_{i,p} |r_ip| exp(-rho_ip) + (1/N) sum_{i,p} (log 2 + rho_ip)``
    """
    (x_rec, log_scale, x_true), torch_in = _as_tensors(x_rec, log_scale, x_true)
    _check_batch(x_rec, x_true)
    if tuple(log_scale.shape) != tuple(x_rec.shape):
        raise ValueError("log-scale map must match the image shape")
    if not torch.all(torch.isfinite(log_scale)):
        raise TrainingFault("non-finite log-scale map")
    residual = x_rec - x_true
    n = x_rec.shape[0]
    value = (residual.abs() * torch.exp(-log_scale)).sum() / n + (LOG2 + log_scale).sum() / n
    if torch_in:
        return value
    return LossValue(float(value), residual.numpy())


def uncertainty_loss_lower_bound(residual):
    """Value of the Laplace loss at the pixelwise optimum ``sigma_p = |r_p|``.

    Only pixels with ``r_p != 0`` contribute (the bound is ``-inf`` otherwise).
    """
    residual = np.asarray(residual, dtype=np.float64)
    r = np.abs(residual[residual != 0])
    return float(np.sum(1.0 + np.log(2.0 * r)) / residual.shape[0])


# -- metrics -------------------------------------------------------------------------

def as_magnitude(x):
    """Collapse the channel axis: modulus for (re, im) pairs, identity for one channel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 2:
        return np.hypot(x[0], x[1])
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    return x


def psnr(x_rec, x_true, peak=None):
    """``10 log10(peak^2 / MSE)``; peak defaults to the ground-truth maximum.

    Returns ``inf`` for identical images.
    """
    x_rec, x_true = check_same_shape(np.asarray(x_rec, dtype=np.float64),
                                     np.asarray(x_true, dtype=np.float64), ("x_rec", "x_true"))
    if peak is None:
        peak = float(np.max(x_true))
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x_rec - x_true) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax**2 / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x_rec, x_true, peak=None, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over all full Gaussian windows.

    Local statistics use an ``window x window`` Gaussian kernel of width
    ``sigma``. ``peak`` defaults to the larger maximum of the two images, which
    keeps the index symmetric in its arguments.
    """
    a, b = check_same_shape(np.asarray(x_rec, dtype=np.float64),
                            np.asarray(x_true, dtype=np.float64), ("x_rec", "x_true"))
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if window > min(a.shape) or window % 2 == 0:
        raise ValueError(f"window {window} must be odd and fit inside image {a.shape}")
    if peak is None:
        peak = max(float(a.max()), float(b.max()))
    if not peak > 0:
        raise ValueError("peak must be positive")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    w = gaussian_window(window, sigma)

    def filt(img):
        return ndimage.correlate(img, w, mode="constant")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    pad = window // 2
    smap = (num / den)[pad:a.shape[0] - pad, pad:a.shape[1] - pad]
    return float(smap.mean())


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    mae: float
    mean_uncertainty: float = math.nan
    peak: float = math.nan

    def as_dict(self):
        return asdict(self)


def image_metrics(x_rec, x_true, log_scale=None):
    """Metrics on magnitude images with the ground-truth-maximum peak convention."""
    rec = as_magnitude(x_rec)
    true = as_magnitude(x_true)
    peak = float(true.max())
    ssim_peak = max(peak, float(rec.max()))
    return MetricReport(
        psnr=psnr(rec, true, peak),
        ssim=ssim(rec, true, peak=ssim_peak) if min(true.shape) >= 11 else math.nan,
        mae=float(np.mean(np.abs(rec - true))),
        mean_uncertainty=float(np.mean(np.exp(log_scale))) if log_scale is not None else math.nan,
        peak=peak)


# -- uncertainty vs error ------------------------------------------------------------

def pearson(a, b):
    """Pearson correlation; returns ``(r, degenerate)`` with r = 0 when undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if v.std() <= 1e-12 * max(float(np.abs(v).max()), 1e-300):
            return 0.0, True
    da, db = a - a.mean(), b - b.mean()
    r = float(np.sum(da * db) / math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db))))
    return min(1.0, max(-1.0, r)), False


def error_uncertainty_table(recons, log_scales, truths, levels=None):
    """Per-image mean |residual| and mean sigma with Pearson r per noise level.

    All arrays are batches along the first axis. ``levels`` assigns a noise
    level label to each image; the correlation is computed per label.
    """
    recons = np.asarray(recons, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    if len(recons) != len(truths) or len(recons) != len(log_scales):
        raise ValueError("recons, log_scales and truths must have equal length")
    if levels is None:
        levels = np.zeros(len(recons))
    levels = np.asarray(levels)
    axes = tuple(range(1, recons.ndim))
    mean_abs = np.mean(np.abs(recons - truths), axis=axes)
    mean_sigma = np.mean(np.exp(log_scales), axis=axes)
    rows = [{"index": i, "level": float(lv), "mean_abs_residual": float(e), "mean_sigma": float(s)}
            for i, (lv, e, s) in enumerate(zip(levels, mean_abs, mean_sigma))]
    per_level = {}
    for lv in np.unique(levels):
        sel = levels == lv
        if sel.sum() < 3:
            raise StatisticsError(f"need at least 3 images per level, got {int(sel.sum())}")
        r, degenerate = pearson(mean_sigma[sel], mean_abs[sel])
        per_level[float(lv)] = {
            "pearson_r": r, "degenerate": degenerate, "count": int(sel.sum()),
            "mean_sigma": float(mean_sigma[sel].mean()), "std_sigma": float(mean_sigma[sel].std()),
            "mean_abs_residual": float(mean_abs[sel].mean()),
            "std_abs_residual": float(mean_abs[sel].std())}
    return rows, per_level


def uncertainty_error_report(method, measurements, images, levels=None):
    """Run an uncertainty-aware method and tabulate error against mean sigma."""
    if not method.has_uncertainty:
        raise TypeError(f"method {method.method!r} does not predict uncertainty")
    recons, log_scales = method.predict(measurements, return_log_scale=True)
    return error_uncertainty_table(recons, log_scales, images, levels)
