"""Image quality metrics."""
from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 100.0


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at 100 dB."""
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / err))
