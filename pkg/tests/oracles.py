"""Slow, obviously-correct reference implementations used by the tests.

Everything here is written in the most literal way possible (explicit
loops, float64) so that disagreements with the production code point at
the production code.
"""
from __future__ import annotations

import numpy as np


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    """Six nested loops over output positions and kernel taps."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for yo in range(ho):
                for xo in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += x[ni, ci, yo * stride + i, xo * stride + j] * w[co, ci, i, j]
                    out[ni, co, yo, xo] = acc + b[co]
    return out


def layer_norm_naive(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     eps: float = 1e-6) -> np.ndarray:
    """Per-pixel channel statistics computed one location at a time."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ni in range(n):
        for yi in range(h):
            for xi in range(w):
                v = x[ni, :, yi, xi]
                mu = v.mean()
                var = ((v - mu) ** 2).mean()
                out[ni, :, yi, xi] = (v - mu) / np.sqrt(var + eps) * gamma + beta
    return out


def psnr_naive(pred: np.ndarray, target: np.ndarray, max_val: float = 1.0) -> float:
    """PSNR in dB with the same 1e-12 mse floor the package uses."""
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    mse = max(mse, 1e-12)
    return 20.0 * np.log10(max_val) - 10.0 * np.log10(mse)


def quadratic_path_residual(w_ba: float, w_ta: float, x: float, y: float,
                            steps: int) -> float:
    """Closed-form completeness gap for L(w) = (w*x - y)^2 along the
    straight path from w_ta to w_ba sampled at left endpoints t/steps.

    Riemann sum of the derivative minus the true loss difference comes
    out to exactly -(dw*x)^2 / steps for this quadratic.
    """
    dw = w_ba - w_ta
    return -((dw * x) ** 2) / steps
