"""Numpy implementations of the dense kernels (fallback backend)."""

from __future__ import annotations

import numpy as np

GELU_CUBIC = 0.044715
GELU_SCALE = 0.7978845608028654  # sqrt(2/pi)
LN_EPS = 1e-5


def _check2d(m: np.ndarray, name: str) -> None:
    if not (isinstance(m, np.ndarray) and m.ndim == 2 and m.dtype == np.float64):
        raise ValueError(f"{name} must be a 2-D float64 array")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check2d(a, "a")
    _check2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T without materialising the transpose."""
    _check2d(a, "a")
    _check2d(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt shape mismatch: {a.shape} x {b.shape}^T")
    return a @ b.T


def softmax_rows(m: np.ndarray) -> np.ndarray:
    _check2d(m, "m")
    # max subtraction keeps exp() in range for magnitudes up to ~1e308
    shifted = m - np.max(m, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def layer_norm_rows(m: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check2d(m, "m")
    if gain.shape != (m.shape[1],) or bias.shape != (m.shape[1],):
        raise ValueError("gain/bias must match row width")
    # shift-invariant mean: constant rows center to exact zeros
    first = m[:, :1]
    mu = first + np.mean(m - first, axis=1, keepdims=True)
    # population variance; eps guards the constant-row case
    var = np.mean((m - mu) ** 2, axis=1, keepdims=True)
    return (m - mu) / np.sqrt(var + LN_EPS) * gain + bias


def gelu_mat(m: np.ndarray) -> np.ndarray:
    _check2d(m, "m")
    inner = GELU_SCALE * (m + GELU_CUBIC * m**3)
    return 0.5 * m * (1.0 + np.tanh(inner))


def gelu_grad_mat(m: np.ndarray) -> np.ndarray:
    _check2d(m, "m")
    inner = GELU_SCALE * (m + GELU_CUBIC * m**3)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * m * sech2 * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * m**2)
