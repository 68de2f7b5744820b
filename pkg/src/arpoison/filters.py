"""AR filters and the valid-mode cross-correlation they are applied with."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ar import ARCoefficients
from .errors import DimensionTooSmall


@dataclass(frozen=True)
class ARFilter:
    """``V x V`` kernel that cancels its own process.

    The kernel is the process' window weights with ``-1`` in the predicted
    (bottom-right) cell, so a window dotted with it gives the prediction
    error of the recurrence.
    """

    kernel: np.ndarray
    source: str | None = None

    @property
    def window_side(self) -> int:
        return self.kernel.shape[0]


def ar_filter(coeffs: ARCoefficients) -> ARFilter:
    kernel = coeffs.weights
    kernel[-1, -1] = -1.0
    kernel.setflags(write=False)
    return ARFilter(kernel, coeffs.ident)


def _kernel(filt) -> np.ndarray:
    return filt.kernel if isinstance(filt, ARFilter) else np.asarray(filt, dtype=np.float64)


def cross_correlate_valid(signal: np.ndarray, filt) -> np.ndarray:
    """Valid-mode 2D cross-correlation (no kernel flip, no padding).

    ``signal`` may carry leading batch axes: (..., H, W) -> (..., H-V+1, W-V+1).
    """
    k = _kernel(filt)
    v0, v1 = k.shape
    signal = np.asarray(signal, dtype=np.float64)
    h, w = signal.shape[-2:]
    if h < v0 or w < v1:
        raise DimensionTooSmall(f"signal {h}x{w} is smaller than the {v0}x{v1} kernel")
    oh, ow = h - v0 + 1, w - v1 + 1
    out = np.zeros(signal.shape[:-2] + (oh, ow))
    for u in range(v0):
        for t in range(v1):
            out += k[u, t] * signal[..., u : u + oh, t : t + ow]
    return out


def conv_response(delta: np.ndarray, filt) -> float | np.ndarray:
    """Sum of the ReLU'd correlation map; batched over leading axes."""
    corr = cross_correlate_valid(delta, filt)
    total = np.maximum(corr, 0.0).sum(axis=(-2, -1))
    return float(total) if np.ndim(total) == 0 else total
