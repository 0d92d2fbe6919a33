from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5,
                     coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e_j) - f(x - h e_j)) / 2h``.

    ``coords`` restricts the evaluation to a subset of flat coordinates; the
    returned vector then has one entry per requested coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.empty(len(idx))
    for k, j in enumerate(idx):
        orig = flat[j]
        flat[j] = orig + step
        fp = float(f(x))
        flat[j] = orig - step
        fm = float(f(x))
        flat[j] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out if coords is not None else out.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-12) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor))
