"""Central finite-difference oracle, independent of the tape."""

from __future__ import annotations

import numpy as np

H = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = H, coords=None) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps an array to a float.

    With ``coords`` (flat indices) only those entries are probed and the
    rest of the result is NaN.
    """
    x = np.array(x, dtype=np.float64)
    g = np.full(x.size, np.nan)
    flat = x.reshape(-1)
    for i in (range(x.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return g.reshape(x.shape)


def rel_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-8) -> bool:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    ok = ~np.isnan(n)
    return bool(np.all(np.abs(a[ok] - n[ok]) <= rtol * np.maximum(np.abs(a[ok]), np.abs(n[ok])) + atol))
