"""Central finite differences, used as the oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from nfuse.tensor import Tensor, no_grad


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Estimate d f / d x elementwise with (f(x + h e_i) - f(x - h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, copy=True)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def evaluate(arr):
        val = f(Tensor(arr, dtype=base.dtype))
        return val.item() if isinstance(val, Tensor) else float(val)

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate(base)
            flat[i] = orig - h
            down = evaluate(base)
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return Tensor(out.reshape(base.shape), dtype=base.dtype)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max absolute deviation scaled by the larger of the two max magnitudes.

    ``floor`` keeps groups whose true gradient is identically zero (e.g. key
    biases, which cancel inside the softmax) from dividing noise by noise.
    """
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)
