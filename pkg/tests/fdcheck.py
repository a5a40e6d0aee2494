"""Central finite differences, kept independent of the tape.

``order=2`` is the textbook three-point stencil.  ``order=4`` is the five-point
stencil with O(h^4) truncation error, which allows a larger step and so keeps
float64 roundoff small even for entries whose gradient is around 1e-9.
"""

import numpy as np

DEFAULT_STEP = {2: 1e-5, 4: 1e-3}


def numeric_grads(f, arrays, h=None, order=4):
    """d f() / d array for each array in ``arrays``; arrays are perturbed in place."""
    if order not in DEFAULT_STEP:
        raise ValueError("order must be 2 or 4")
    h = DEFAULT_STEP[order] if h is None else h
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            if order == 2:
                arr[idx] = orig + h
                hi = f()
                arr[idx] = orig - h
                lo = f()
                g[idx] = (hi - lo) / (2 * h)
            else:
                vals = []
                for k in (2, 1, -1, -2):
                    arr[idx] = orig + k * h
                    vals.append(f())
                g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            arr[idx] = orig
        out.append(g)
    return out


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def max_rel_err(analytic: dict, numeric: dict) -> float:
    return max(float(rel_err(analytic[k], numeric[k]).max(initial=0.0)) for k in analytic)
