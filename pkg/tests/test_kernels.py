"""Compiled extension vs pure-NumPy fallback: identical semantics."""

import numpy as np
import pytest

from aerialview import _kernels_py as kp

compiled = pytest.importorskip("aerialview._kernels")


@pytest.mark.parametrize("n,bins", [(64, 8), (1000, 16), (4096, 64)])
def test_soft_pdf_1d_agrees(n, bins):
    rng = np.random.default_rng(n)
    x = rng.normal(size=n)
    args = (x, -4.0, 4.0, bins, 8.0 / bins * 0.5)
    assert np.allclose(compiled.soft_pdf_1d(*args), kp.soft_pdf_1d(*args), atol=1e-12)


@pytest.mark.parametrize("n,bins", [(64, 8), (1000, 16), (4096, 64)])
def test_soft_pdf_joint_agrees(n, bins):
    rng = np.random.default_rng(n + 1)
    x = rng.normal(size=n)
    y = rng.normal(size=n)
    args = (x, y, -4.0, 4.0, bins, 8.0 / bins * 0.5)
    assert np.allclose(compiled.soft_pdf_joint(*args), kp.soft_pdf_joint(*args), atol=1e-12)


def test_gradient_kernels_agree():
    rng = np.random.default_rng(2)
    n, bins = 500, 16
    x = rng.normal(size=n)
    y = rng.normal(size=n)
    coeff = rng.normal(size=bins)
    cj = np.ascontiguousarray(rng.normal(size=(bins, bins)))
    sig = 8.0 / bins * 0.5
    a = compiled.chain_gradient(x, -4.0, 4.0, bins, sig, coeff)
    b = kp.chain_gradient(x, -4.0, 4.0, bins, sig, coeff)
    assert np.allclose(a, b, atol=1e-12)
    a = compiled.mi_chain_gradient(x, y, -4.0, 4.0, bins, sig, coeff, cj)
    b = kp.mi_chain_gradient(x, y, -4.0, 4.0, bins, sig, coeff, cj)
    assert np.allclose(a, b, atol=1e-12)


def test_underflow_fallback_agrees():
    # values far outside the fixed range underflow every kernel weight
    x = np.array([0.0, 1e6, -1e6, 0.5])
    args = (x, -1.0, 1.0, 8, 0.01)
    pc = compiled.soft_pdf_1d(*args)
    pp = kp.soft_pdf_1d(*args)
    assert np.allclose(pc, pp, atol=1e-15)
    assert abs(pc.sum() - 1.0) < 1e-12
    coeff = np.arange(8.0)
    gc = compiled.chain_gradient(x, -1.0, 1.0, 8, 0.01, coeff)
    gp = kp.chain_gradient(x, -1.0, 1.0, 8, 0.01, coeff)
    assert np.allclose(gc, gp, atol=1e-15)
    assert gc[1] == 0.0 and gc[2] == 0.0
