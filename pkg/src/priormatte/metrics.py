"""Alpha-matte error metrics over the unknown trimap region.

Conventions (pinned here for reproducibility, config-visible):
  SAD  = sum of |diff| over UK pixels, divided by 1000
  MSE  = mean of diff^2 over UK pixels, times 1e3
  Grad = sum over UK of squared gradient-magnitude difference / 1000,
         gradients from Gaussian-derivative filters with sigma = 1.4
  Conn = sum over UK of |phi(pred) - phi(gt)| / 1000, connectivity computed
         with threshold step 0.1 and the 0.15 penalty knee, 4-connected
         components (one of the known variants of the published metric).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.measure import label as cc_label

from .trimap import AlphaMatte, Region, Trimap

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_KNEE = 0.15


@dataclass
class MetricReport:
    sad: float
    mse: float
    grad: float
    conn: float
    region: str = "unknown"

    def as_row(self):
        return [self.sad, self.mse, self.grad, self.conn]


def _gauss(x, sigma):
    return np.exp(-x ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))


def _dgauss(x, sigma):
    return -x * _gauss(x, sigma) / sigma ** 2


def gaussian_derivative_kernels(sigma=GRAD_SIGMA, epsilon=1e-2):
    """L2-normalized x/y Gaussian-derivative filter pair."""
    half = int(np.ceil(
        sigma * np.sqrt(-2.0 * np.log(np.sqrt(2 * np.pi) * sigma * epsilon))))
    coords = np.arange(-half, half + 1)
    hx = _gauss(coords[:, None], sigma) * _dgauss(coords[None, :], sigma)
    hx = hx / np.sqrt(np.sum(hx * hx))
    return hx, hx.T


def gradient_magnitude(alpha, sigma=GRAD_SIGMA):
    hx, hy = gaussian_derivative_kernels(sigma)
    gx = ndimage.correlate(alpha, hx, mode="nearest")
    gy = ndimage.correlate(alpha, hy, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def connectivity_map(pred, gt, step=CONN_STEP):
    """Per-pixel largest threshold at which the pixel still belongs to the
    biggest jointly-connected region."""
    l_map = np.full(pred.shape, -1.0)
    thresholds = np.arange(step, 1.0 + step / 2, step)
    for i, th in enumerate(thresholds):
        joint = (pred >= th) & (gt >= th)
        labels, n = cc_label(joint, connectivity=1, return_num=True)
        if n:
            sizes = np.bincount(labels.ravel())[1:]
            omega = labels == (np.argmax(sizes) + 1)
        else:
            omega = np.zeros(pred.shape, dtype=bool)
        newly_cut = (l_map == -1.0) & ~omega
        l_map[newly_cut] = th - step
    l_map[l_map == -1.0] = 1.0
    return l_map


def _phi(alpha, l_map):
    d = alpha - l_map
    return 1.0 - d * (d >= CONN_KNEE)


def compute_metrics(pred: AlphaMatte, gt: AlphaMatte,
                    trimap: Trimap) -> MetricReport:
    """SAD/MSE/Grad/Conn over the unknown region; zeros when it is empty."""
    p = pred.values.astype(np.float64)
    g = gt.values.astype(np.float64)
    if p.shape != g.shape or p.shape != trimap.labels.shape:
        raise ValueError(
            f"metric size mismatch: pred {p.shape}, gt {g.shape}, "
            f"trimap {trimap.labels.shape}")
    uk = trimap.labels == Region.UK
    if not uk.any():
        return MetricReport(0.0, 0.0, 0.0, 0.0, region="empty")
    diff = p - g
    sad = float(np.abs(diff)[uk].sum()) / 1000.0
    mse = float((diff * diff)[uk].mean()) * 1e3
    grad_err = (gradient_magnitude(p) - gradient_magnitude(g)) ** 2
    grad = float(grad_err[uk].sum()) / 1000.0
    l_map = connectivity_map(p, g)
    conn_err = np.abs(_phi(p, l_map) - _phi(g, l_map))
    conn = float(conn_err[uk].sum()) / 1000.0
    return MetricReport(sad, mse, grad, conn)
