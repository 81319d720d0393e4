# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for soft histogramming and its gradients.

Semantics match aerialview._kernels_py exactly; see that module for the
definition of the binning scheme and the underflow fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

COMPILED = True


cdef inline Py_ssize_t _nearest_bin(double v, double lo, double hi, Py_ssize_t bins) noexcept nogil:
    cdef long idx = <long>(((v - lo) / (hi - lo)) * bins)
    if idx < 0:
        idx = 0
    if idx >= bins:
        idx = bins - 1
    return idx


cdef inline double _fill_weights(double v, double c0, double step, double sigma,
                                 Py_ssize_t bins, double* w) noexcept nogil:
    """Unnormalized kernel weights for one sample; returns their sum."""
    cdef Py_ssize_t b
    cdef double d, s = 0.0
    for b in range(bins):
        d = (v - (c0 + b * step)) / sigma
        w[b] = exp(-0.5 * d * d)
        s += w[b]
    return s


def soft_pdf_1d(const double[::1] values, double lo, double hi, Py_ssize_t bins, double sigma):
    cdef Py_ssize_t n = values.shape[0]
    out = np.zeros(bins, dtype=np.float64)
    buf = np.empty(bins, dtype=np.float64)
    cdef double[::1] p = out
    cdef double[::1] w = buf
    cdef double step = (hi - lo) / bins
    cdef double c0 = lo + 0.5 * step
    cdef Py_ssize_t i, b
    cdef double s
    with nogil:
        for i in range(n):
            s = _fill_weights(values[i], c0, step, sigma, bins, &w[0])
            if s == 0.0:
                p[_nearest_bin(values[i], lo, hi, bins)] += 1.0
            else:
                for b in range(bins):
                    p[b] += w[b] / s
        for b in range(bins):
            p[b] /= n
    return out


def soft_pdf_joint(const double[::1] x, const double[::1] y, double lo, double hi,
                   Py_ssize_t bins, double sigma):
    cdef Py_ssize_t n = x.shape[0]
    out = np.zeros((bins, bins), dtype=np.float64)
    bufx = np.empty(bins, dtype=np.float64)
    bufy = np.empty(bins, dtype=np.float64)
    cdef double[:, ::1] pj = out
    cdef double[::1] wx = bufx
    cdef double[::1] wy = bufy
    cdef double step = (hi - lo) / bins
    cdef double c0 = lo + 0.5 * step
    cdef Py_ssize_t i, b, c
    cdef double sx, sy, wxb
    with nogil:
        for i in range(n):
            sx = _fill_weights(x[i], c0, step, sigma, bins, &wx[0])
            if sx == 0.0:
                for b in range(bins):
                    wx[b] = 0.0
                wx[_nearest_bin(x[i], lo, hi, bins)] = 1.0
                sx = 1.0
            sy = _fill_weights(y[i], c0, step, sigma, bins, &wy[0])
            if sy == 0.0:
                for b in range(bins):
                    wy[b] = 0.0
                wy[_nearest_bin(y[i], lo, hi, bins)] = 1.0
                sy = 1.0
            for b in range(bins):
                wxb = wx[b] / sx
                if wxb != 0.0:
                    for c in range(bins):
                        pj[b, c] += wxb * (wy[c] / sy)
        for b in range(bins):
            for c in range(bins):
                pj[b, c] /= n
    return out


def chain_gradient(const double[::1] values, double lo, double hi, Py_ssize_t bins,
                   double sigma, const double[::1] coeff):
    cdef Py_ssize_t n = values.shape[0]
    out = np.zeros(n, dtype=np.float64)
    buf = np.empty(bins, dtype=np.float64)
    cdef double[::1] grad = out
    cdef double[::1] w = buf
    cdef double step = (hi - lo) / bins
    cdef double c0 = lo + 0.5 * step
    cdef double inv_s2 = 1.0 / (sigma * sigma)
    cdef Py_ssize_t i, b
    cdef double s, wn, d, t1, cw, wd
    with nogil:
        for i in range(n):
            s = _fill_weights(values[i], c0, step, sigma, bins, &w[0])
            if s == 0.0:
                continue
            t1 = 0.0
            cw = 0.0
            wd = 0.0
            for b in range(bins):
                wn = w[b] / s
                d = ((c0 + b * step) - values[i]) * inv_s2
                t1 += coeff[b] * wn * d
                cw += coeff[b] * wn
                wd += wn * d
            grad[i] = (t1 - cw * wd) / n
    return out


def mi_chain_gradient(const double[::1] x, const double[::1] y, double lo, double hi,
                      Py_ssize_t bins, double sigma, const double[::1] coeff_marginal,
                      const double[:, ::1] coeff_joint):
    cdef Py_ssize_t n = x.shape[0]
    out = np.zeros(n, dtype=np.float64)
    bufx = np.empty(bins, dtype=np.float64)
    bufy = np.empty(bins, dtype=np.float64)
    bufa = np.empty(bins, dtype=np.float64)
    cdef double[::1] grad = out
    cdef double[::1] wx = bufx
    cdef double[::1] wy = bufy
    cdef double[::1] a = bufa
    cdef double step = (hi - lo) / bins
    cdef double c0 = lo + 0.5 * step
    cdef double inv_s2 = 1.0 / (sigma * sigma)
    cdef Py_ssize_t i, b, c
    cdef double sx, sy, wn, d, t1, aw, wd, acc
    with nogil:
        for i in range(n):
            sx = _fill_weights(x[i], c0, step, sigma, bins, &wx[0])
            if sx == 0.0:
                continue
            sy = _fill_weights(y[i], c0, step, sigma, bins, &wy[0])
            if sy == 0.0:
                for b in range(bins):
                    wy[b] = 0.0
                wy[_nearest_bin(y[i], lo, hi, bins)] = 1.0
                sy = 1.0
            for b in range(bins):
                acc = 0.0
                for c in range(bins):
                    acc += coeff_joint[b, c] * (wy[c] / sy)
                a[b] = coeff_marginal[b] + acc
            t1 = 0.0
            aw = 0.0
            wd = 0.0
            for b in range(bins):
                wn = wx[b] / sx
                d = ((c0 + b * step) - x[i]) * inv_s2
                t1 += a[b] * wn * d
                aw += a[b] * wn
                wd += wn * d
            grad[i] = (t1 - aw * wd) / n
    return out
