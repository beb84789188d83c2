"""Independent numerical oracles shared across the test suite.

Everything here is deliberately written against textbook formulas or plain
finite differences, not against the package internals, so it can certify them.
"""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def gauss_logpdf_1d(x, mean, var):
    """Scalar Gaussian log density from the textbook formula."""
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (x - mean) ** 2 / var


def gauss_logpdf(x, mean, cov):
    """Multivariate Gaussian log density via slogdet and an explicit solve."""
    x = np.asarray(x, float)
    mean = np.asarray(mean, float)
    cov = np.atleast_2d(np.asarray(cov, float))
    resid = x - mean
    _, logdet = np.linalg.slogdet(cov)
    quad = resid @ np.linalg.solve(cov, resid)
    return -0.5 * (x.size * LOG_2PI + logdet + quad)


def gauss_entropy(cov):
    """Differential entropy of a Gaussian: 0.5 * logdet(2 pi e cov)."""
    cov = np.atleast_2d(np.asarray(cov, float))
    n = cov.shape[0]
    _, logdet = np.linalg.slogdet(cov)
    return 0.5 * (n * (LOG_2PI + 1.0) + logdet)


def gauss_kl(mean0, cov0, mean1, cov1):
    """KL(N0 || N1) in closed form."""
    mean0, mean1 = np.asarray(mean0, float), np.asarray(mean1, float)
    cov0 = np.atleast_2d(np.asarray(cov0, float))
    cov1 = np.atleast_2d(np.asarray(cov1, float))
    n = mean0.size
    cov1_inv = np.linalg.inv(cov1)
    diff = mean1 - mean0
    _, logdet0 = np.linalg.slogdet(cov0)
    _, logdet1 = np.linalg.slogdet(cov1)
    return 0.5 * (np.trace(cov1_inv @ cov0) + diff @ cov1_inv @ diff - n + logdet1 - logdet0)


def central_diff_grad(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def central_diff_hess(f, x, h=1e-4):
    """Central finite-difference Hessian of a scalar function."""
    x = np.asarray(x, float)
    n = x.size
    hess = np.zeros((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        for j in range(i, n):
            ej = np.zeros(n)
            ej[j] = h
            val = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h * h)
            hess[i, j] = hess[j, i] = val
    return hess


def central_diff_jacobian(f, x, h=1e-6):
    """Central finite-difference Jacobian of a vector function."""
    x = np.asarray(x, float)
    f0 = np.asarray(f(x), float)
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        jac[:, i] = (np.asarray(f(x + step)) - np.asarray(f(x - step))) / (2.0 * h)
    return jac


def rel_err(got, want, floor=1.0):
    """Max absolute deviation scaled by the larger of `floor` and the target scale."""
    got = np.asarray(got, float)
    want = np.asarray(want, float)
    scale = max(floor, float(np.max(np.abs(want))) if want.size else floor)
    return float(np.max(np.abs(got - want))) / scale if got.size else 0.0
