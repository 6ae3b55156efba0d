"""Pure-numpy reference versions of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature.
"""
import numpy as np
from scipy.spatial.distance import cdist, pdist


def layer_norm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd
    return y, rstd[..., 0]


def layer_norm_bwd(gy, y, rstd):
    # y is the normalized output, rstd the saved reciprocal std
    m1 = gy.mean(axis=-1, keepdims=True)
    m2 = (gy * y).mean(axis=-1, keepdims=True)
    return (gy - m1 - y * m2) * rstd[..., None]


def silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_bwd(gy, x, s):
    return gy * (s * (1.0 + x * (1.0 - s)))


def gaussian_kernel_sums(x, y, bandwidth):
    """Kernel sums for the MMD estimators.

    Returns ``(sxx, syy, sxy, txy)``: off-diagonal sums of k(x, x) and
    k(y, y), the full sum of k(x, y), and the trace of k(x, y) (only
    meaningful when both sets have equal size).
    """
    gamma = 0.5 / (bandwidth * bandwidth)
    kxx = np.exp(-gamma * pdist(x, "sqeuclidean"))
    kyy = np.exp(-gamma * pdist(y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    n = min(len(x), len(y))
    return (
        2.0 * float(kxx.sum()),
        2.0 * float(kyy.sum()),
        float(kxy.sum()),
        float(np.trace(kxy[:n, :n])),
    )


def mean_pairwise_distance(x):
    return float(pdist(x, "euclidean").mean())
