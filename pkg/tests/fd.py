"""Central finite-difference oracle used by the gradient tests.

All probing runs on float64 copies of the parameters (the production forward
already computes in float64). Agreement is judged per parameter group at the
gradient-vector level: max |fd - analytic| over the group divided by the
largest gradient magnitude in the group, so tiny components are not drowned
by the oracle's own O(step^2) truncation noise.
"""

import numpy as np


def central_diff(f, arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Gradient of scalar f with respect to every entry of arr."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(arr)
        flat[i] = orig - step
        down = f(arr)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def rel_error(fd: np.ndarray, analytic: np.ndarray) -> float:
    """Vector-level relative error between an FD estimate and a gradient."""
    fd = np.asarray(fd, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(float(np.abs(fd).max(initial=0.0)),
                float(np.abs(analytic).max(initial=0.0)), 1e-8)
    return float(np.abs(fd - analytic).max(initial=0.0)) / scale
