"""Pure NumPy reference kernels.

Every function here has a compiled twin in `_core.pyx` with the same
signature and the same algorithm (same reduction structure, same order of
operations up to vectorization). All kernels write into caller-provided
output arrays; callers guarantee C-contiguity and matching float32/float64
dtypes.
"""

import numpy as np
from scipy.special import erf

NAME = "pure"

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def ln_fwd(x, gamma, beta, eps, y, mean, rstd):
    # x, y: (M, K); gamma, beta: (K,); mean, rstd: (M,)
    mu = x.mean(axis=1)
    var = ((x - mu[:, None]) ** 2).mean(axis=1)
    r = 1.0 / np.sqrt(var + eps)
    mean[:] = mu
    rstd[:] = r
    y[:] = (x - mu[:, None]) * r[:, None] * gamma + beta


def ln_bwd(dy, x, gamma, mean, rstd, dx, dgamma, dbeta):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dbeta[:] = dy.sum(axis=0)
    dgamma[:] = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx[:] = (dxhat - m1 - xhat * m2) * rstd[:, None]


def gelu_fwd(x, y):
    # exact (erf) form
    y[:] = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, g, dx):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    dx[:] = g * (cdf + x * pdf)


def softmax_fwd(x, y):
    # rows of (M, N)
    m = x.max(axis=1, keepdims=True)
    np.exp(x - m, out=y)
    y /= y.sum(axis=1, keepdims=True)


def softmax_bwd(y, g, dx):
    dot = (y * g).sum(axis=1, keepdims=True)
    dx[:] = y * (g - dot)


def adamw_step(p, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
    """One decoupled-weight-decay Adam update, in place.

    c1 = 1 - beta1**t and c2 = 1 - beta2**t are the bias corrections,
    precomputed by the optimizer.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / c1
    vhat = v / c2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
