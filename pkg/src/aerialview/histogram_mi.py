"""Histogram-based probability estimates over latent values: soft (kernel)
binning with analytic gradients, entropy, mutual information, and the L2 and
earth-mover baseline guidance functionals.

All entropies and mutual information are in nats. Soft binning is the
default so that every functional is differentiable; hard binning
(soft_bandwidth = 0) is kept for oracle checks and has no gradient.

The inner loops live in a compiled extension when available, with a NumPy
fallback selected at import (force it with AERIALVIEW_PURE_PYTHON=1).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .domain import (
    GuidanceConfig,
    InvalidInputError,
    LatentTensor,
    UnsupportedGradientError,
)

if os.environ.get("AERIALVIEW_PURE_PYTHON"):
    from . import _kernels_py as _k
else:
    try:
        from . import _kernels as _k  # type: ignore[no-redef]
    except ImportError:
        from . import _kernels_py as _k  # type: ignore[no-redef]

COMPILED_KERNELS: bool = bool(_k.COMPILED)

_LOG_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Pdf1D:
    """Normalized histogram over B bins."""

    p: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.p, dtype=np.float64))
        if arr.ndim != 1 or arr.size < 2:
            raise InvalidInputError("Pdf1D needs a 1-d array with >= 2 bins")
        if np.any(arr < 0.0):
            raise InvalidInputError("pdf entries must be non-negative")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise InvalidInputError("pdf must sum to 1 within 1e-9")
        arr.setflags(write=False)
        object.__setattr__(self, "p", arr)

    @property
    def bins(self) -> int:
        return self.p.size


@dataclass(frozen=True, eq=False)
class Pdf2D:
    """Normalized joint histogram over a B x B grid."""

    p: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.p, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise InvalidInputError("Pdf2D needs a square array with >= 2 bins")
        if np.any(arr < 0.0):
            raise InvalidInputError("pdf entries must be non-negative")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise InvalidInputError("pdf must sum to 1 within 1e-9")
        arr.setflags(write=False)
        object.__setattr__(self, "p", arr)

    @property
    def bins(self) -> int:
        return self.p.shape[0]


# ---------------------------------------------------------------------------
# Input plumbing
# ---------------------------------------------------------------------------

def flatten_latents(z: LatentTensor) -> np.ndarray:
    """Flatten a (C, H, W) latent grid to a channel-major vector."""
    return z.data.ravel()


def _as_samples(values, name: str = "values") -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64).ravel())
    if arr.size == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def resolve_range(cfg: GuidanceConfig, *arrays: np.ndarray) -> tuple[float, float]:
    """The histogram value range: cfg.value_range if fixed, else the min/max
    over the union of all given sample arrays."""
    if cfg.value_range is not None:
        return cfg.value_range
    lo = min(float(a.min()) for a in arrays)
    hi = max(float(a.max()) for a in arrays)
    return lo, hi


def _sigma(cfg: GuidanceConfig, lo: float, hi: float) -> float:
    return cfg.soft_bandwidth * (hi - lo) / cfg.num_bins


def _delta_pdf_1d(bins: int) -> np.ndarray:
    p = np.zeros(bins)
    p[bins // 2] = 1.0
    return p


def _hard_pdf_1d(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    idx = np.clip(((values - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    return np.bincount(idx, minlength=bins).astype(np.float64) / values.size


def _hard_pdf_joint(x: np.ndarray, y: np.ndarray, lo: float, hi: float,
                    bins: int) -> np.ndarray:
    ix = np.clip(((x - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    iy = np.clip(((y - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(ix * bins + iy, minlength=bins * bins).astype(np.float64)
    return counts.reshape(bins, bins) / x.size


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

def soft_histogram(values, cfg: GuidanceConfig) -> Pdf1D:
    """Kernel-binned pdf of the samples. A degenerate value range (all
    samples identical under a per-pair range) puts all mass in the center
    bin rather than erroring."""
    v = _as_samples(values)
    lo, hi = resolve_range(cfg, v)
    if hi <= lo:
        return Pdf1D(_delta_pdf_1d(cfg.num_bins))
    if cfg.soft_bandwidth == 0.0:
        return Pdf1D(_hard_pdf_1d(v, lo, hi, cfg.num_bins))
    return Pdf1D(_k.soft_pdf_1d(v, lo, hi, cfg.num_bins, _sigma(cfg, lo, hi)))


def joint_histogram(x, y, cfg: GuidanceConfig) -> Pdf2D:
    """Joint pdf of co-located sample pairs (x[i], y[i]) on a shared range."""
    vx = _as_samples(x, "x")
    vy = _as_samples(y, "y")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    lo, hi = resolve_range(cfg, vx, vy)
    b = cfg.num_bins
    if hi <= lo:
        p = np.zeros((b, b))
        p[b // 2, b // 2] = 1.0
        return Pdf2D(p)
    if cfg.soft_bandwidth == 0.0:
        return Pdf2D(_hard_pdf_joint(vx, vy, lo, hi, b))
    return Pdf2D(_k.soft_pdf_joint(vx, vy, lo, hi, b, _sigma(cfg, lo, hi)))


def entropy(pdf: Pdf1D | Pdf2D) -> float:
    """Shannon entropy -sum p log p in nats, with 0 log 0 taken as 0."""
    flat = pdf.p.ravel()
    nz = flat[flat > 0.0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# Mutual information
# ---------------------------------------------------------------------------

def mutual_information(x, y, cfg: GuidanceConfig) -> float:
    """I(X, Y) = H(X) + H(Y) - H(X, Y) over the binned value distributions,
    clamped to >= 0 at return."""
    vx = _as_samples(x, "x")
    vy = _as_samples(y, "y")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    lo, hi = resolve_range(cfg, vx, vy)
    if hi <= lo:
        return 0.0
    b = cfg.num_bins
    if cfg.soft_bandwidth == 0.0:
        px = Pdf1D(_hard_pdf_1d(vx, lo, hi, b))
        py = Pdf1D(_hard_pdf_1d(vy, lo, hi, b))
        pj = Pdf2D(_hard_pdf_joint(vx, vy, lo, hi, b))
    else:
        s = _sigma(cfg, lo, hi)
        px = Pdf1D(_k.soft_pdf_1d(vx, lo, hi, b, s))
        py = Pdf1D(_k.soft_pdf_1d(vy, lo, hi, b, s))
        pj = Pdf2D(_k.soft_pdf_joint(vx, vy, lo, hi, b, s))
    return max(0.0, (entropy(px) + entropy(py)) - entropy(pj))


def mi_gradient(z, z_ref, cfg: GuidanceConfig) -> np.ndarray:
    """Exact gradient of mutual_information(z, z_ref, cfg) with respect to z,
    treating z_ref and the resolved value range as constants."""
    if cfg.soft_bandwidth == 0.0:
        raise UnsupportedGradientError("hard binning has no usable gradient")
    vx = _as_samples(z, "z")
    vy = _as_samples(z_ref, "z_ref")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    lo, hi = resolve_range(cfg, vx, vy)
    if hi <= lo:
        return np.zeros(vx.size)
    b = cfg.num_bins
    s = _sigma(cfg, lo, hi)
    px = _k.soft_pdf_1d(vx, lo, hi, b, s)
    pj = _k.soft_pdf_joint(vx, vy, lo, hi, b, s)
    coeff_marginal = -(np.log(np.maximum(px, _LOG_EPS)) + 1.0)
    coeff_joint = np.ascontiguousarray(np.log(np.maximum(pj, _LOG_EPS)) + 1.0)
    return _k.mi_chain_gradient(vx, vy, lo, hi, b, s, coeff_marginal, coeff_joint)


# ---------------------------------------------------------------------------
# Baseline guidance functionals
# ---------------------------------------------------------------------------

def l2_distance(z, z_ref) -> float:
    vx = _as_samples(z, "z")
    vy = _as_samples(z_ref, "z_ref")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    d = vx - vy
    return float(d @ d)


def l2_gradient(z, z_ref) -> np.ndarray:
    vx = _as_samples(z, "z")
    vy = _as_samples(z_ref, "z_ref")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    return 2.0 * (vx - vy)


def _cdf_sign_coeff(px: np.ndarray, pr: np.ndarray, step: float) -> np.ndarray:
    # d EMD / d px_b = step * sum_{k >= b, k <= B-2} sign(CDFx_k - CDFr_k);
    # the k = B-1 term is identically zero (both CDFs end at 1).
    diff = np.cumsum(px)[:-1] - np.cumsum(pr)[:-1]
    sgn = np.append(np.sign(diff), 0.0)
    return step * np.flip(np.cumsum(np.flip(sgn)))


def wasserstein_distance(z, z_ref, cfg: GuidanceConfig) -> float:
    """1-d earth-mover distance between the binned value distributions:
    sum_b |CDF_z(b) - CDF_ref(b)| * bin_width."""
    vx = _as_samples(z, "z")
    vy = _as_samples(z_ref, "z_ref")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    lo, hi = resolve_range(cfg, vx, vy)
    if hi <= lo:
        return 0.0
    step = (hi - lo) / cfg.num_bins
    px = soft_histogram_with_range(vx, cfg, lo, hi)
    pr = soft_histogram_with_range(vy, cfg, lo, hi)
    return float(np.abs(np.cumsum(px)[:-1] - np.cumsum(pr)[:-1]).sum() * step)


def wasserstein_gradient(z, z_ref, cfg: GuidanceConfig) -> np.ndarray:
    if cfg.soft_bandwidth == 0.0:
        raise UnsupportedGradientError("hard binning has no usable gradient")
    vx = _as_samples(z, "z")
    vy = _as_samples(z_ref, "z_ref")
    if vx.size != vy.size:
        raise InvalidInputError(f"length mismatch: {vx.size} vs {vy.size}")
    lo, hi = resolve_range(cfg, vx, vy)
    if hi <= lo:
        return np.zeros(vx.size)
    b = cfg.num_bins
    s = _sigma(cfg, lo, hi)
    step = (hi - lo) / b
    px = _k.soft_pdf_1d(vx, lo, hi, b, s)
    pr = _k.soft_pdf_1d(vy, lo, hi, b, s)
    coeff = np.ascontiguousarray(_cdf_sign_coeff(px, pr, step))
    return _k.chain_gradient(vx, lo, hi, b, s, coeff)


def soft_histogram_with_range(values: np.ndarray, cfg: GuidanceConfig,
                              lo: float, hi: float) -> np.ndarray:
    """Pdf array over an explicitly resolved range (shared-range helper)."""
    if cfg.soft_bandwidth == 0.0:
        return _hard_pdf_1d(values, lo, hi, cfg.num_bins)
    return _k.soft_pdf_1d(values, lo, hi, cfg.num_bins, _sigma(cfg, lo, hi))
