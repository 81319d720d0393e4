"""Pure-NumPy reference kernels for soft histogramming and its gradients.

This module defines the semantics; the compiled extension in _kernels.pyx
implements the same functions and is preferred at import time when present.

Soft binning: bin centers sit at lo + (b + 0.5) * step for step = (hi-lo)/bins.
Each sample spreads Gaussian weights exp(-0.5 ((v - c_b)/sigma)^2) over the
centers, normalized per sample so every sample contributes total mass 1/n.
If all of a sample's kernel weights underflow to zero (possible only for
values far outside [lo, hi]), the sample falls back to full mass on the
nearest bin and contributes zero gradient.
"""

from __future__ import annotations

import numpy as np

COMPILED = False


def _centers(lo: float, hi: float, bins: int) -> np.ndarray:
    step = (hi - lo) / bins
    return lo + (np.arange(bins, dtype=np.float64) + 0.5) * step


def _normalized_weights(values: np.ndarray, lo: float, hi: float, bins: int,
                        sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample normalized kernel weights (n, bins) and the bin centers."""
    centers = _centers(lo, hi, bins)
    d = (values[:, None] - centers[None, :]) / sigma
    w = np.exp(-0.5 * d * d)
    s = w.sum(axis=1)
    dead = s == 0.0
    if np.any(dead):
        idx = np.clip(((values[dead] - lo) / (hi - lo) * bins).astype(np.int64),
                      0, bins - 1)
        w[dead] = 0.0
        w[dead, idx] = 1.0
        s[dead] = 1.0
    return w / s[:, None], centers


def soft_pdf_1d(values: np.ndarray, lo: float, hi: float, bins: int,
                sigma: float) -> np.ndarray:
    w, _ = _normalized_weights(values, lo, hi, bins, sigma)
    return w.mean(axis=0)


def soft_pdf_joint(x: np.ndarray, y: np.ndarray, lo: float, hi: float,
                   bins: int, sigma: float) -> np.ndarray:
    wx, _ = _normalized_weights(x, lo, hi, bins, sigma)
    wy, _ = _normalized_weights(y, lo, hi, bins, sigma)
    return wx.T @ wy / x.size


def chain_gradient(values: np.ndarray, lo: float, hi: float, bins: int,
                   sigma: float, coeff: np.ndarray) -> np.ndarray:
    """Gradient of sum_b coeff[b] * p[b] with respect to the samples,
    where p = soft_pdf_1d(values, ...)."""
    w, centers = _normalized_weights(values, lo, hi, bins, sigma)
    d = (centers[None, :] - values[:, None]) / (sigma * sigma)
    cw = w * coeff[None, :]
    term1 = (cw * d).sum(axis=1)
    term2 = cw.sum(axis=1) * (w * d).sum(axis=1)
    return (term1 - term2) / values.size


def mi_chain_gradient(x: np.ndarray, y: np.ndarray, lo: float, hi: float,
                      bins: int, sigma: float, coeff_marginal: np.ndarray,
                      coeff_joint: np.ndarray) -> np.ndarray:
    """Gradient with respect to x of
    sum_b coeff_marginal[b] * px[b] + sum_bc coeff_joint[b,c] * joint[b,c],
    with y held constant."""
    wx, centers = _normalized_weights(x, lo, hi, bins, sigma)
    wy, _ = _normalized_weights(y, lo, hi, bins, sigma)
    a = coeff_marginal[None, :] + wy @ coeff_joint.T
    d = (centers[None, :] - x[:, None]) / (sigma * sigma)
    aw = a * wx
    term1 = (aw * d).sum(axis=1)
    term2 = aw.sum(axis=1) * (wx * d).sum(axis=1)
    return (term1 - term2) / x.size
