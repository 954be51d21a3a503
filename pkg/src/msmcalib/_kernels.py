"""Numeric inner loops with numba and numpy implementations.

Both paths compute identical quantities; `tilt_eval` and `logistic_eval`
dispatch on the active backend (see `msmcalib._backend`).
"""

import math

import numpy as np

from ._backend import get_backend, njit

# exp() overflows just above 709; leave a margin for the w0 factor.
EXP_LIMIT = 700.0


@njit
def _tilt_eval_numba(w0, K, lam, l):
    # one fused pass for K lam, the guard, exp and the gradient; the
    # Hessian goes to BLAS through np.dot on the sqrt-weighted rows
    m, r = K.shape
    grad = np.zeros(r)
    scaled = np.empty((m, r))
    obj = 0.0
    for i in range(m):
        z = 0.0
        for q in range(r):
            z += K[i, q] * lam[q]
        if abs(z) > EXP_LIMIT:
            return False, np.inf, grad, np.zeros((r, r))
        e = w0[i] * math.exp(z)
        obj += e
        se = math.sqrt(e)
        for q in range(r):
            grad[q] += K[i, q] * e
            scaled[i, q] = K[i, q] * se
    hess = np.dot(scaled.T, scaled)
    for q in range(r):
        obj -= l[q] * lam[q]
        grad[q] -= l[q]
    return True, obj, grad, hess


def _tilt_eval_numpy(w0, K, lam, l):
    z = K @ lam
    if z.size and np.max(np.abs(z)) > EXP_LIMIT:
        r = K.shape[1]
        return False, np.inf, np.zeros(r), np.zeros((r, r))
    e = w0 * np.exp(z)
    obj = e.sum() - l @ lam
    grad = K.T @ e - l
    hess = (K * e[:, None]).T @ K
    return True, float(obj), grad, 0.5 * (hess + hess.T)


def tilt_eval(w0, K, lam, l):
    """Return ``(ok, objective, gradient, hessian)`` of the exponential-tilt objective.

    ``ok`` is False when some ``|K_i . lam|`` exceeds the overflow guard; the
    other outputs are then meaningless.
    """
    w0 = np.ascontiguousarray(w0, dtype=np.float64)
    K = np.ascontiguousarray(K, dtype=np.float64)
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    l = np.ascontiguousarray(l, dtype=np.float64)
    if get_backend() == "numba":
        ok, obj, grad, hess = _tilt_eval_numba(w0, K, lam, l)
        return bool(ok), float(obj), grad, 0.5 * (hess + hess.T)
    return _tilt_eval_numpy(w0, K, lam, l)


@njit
def _log1pexp(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit
def _logistic_eval_numba(X, y, w, beta):
    n, p = X.shape
    score = np.zeros(p)
    scaled = np.empty((n, p))
    loglik = 0.0
    for i in range(n):
        eta = 0.0
        for q in range(p):
            eta += X[i, q] * beta[q]
        if w[i] != 0.0:
            loglik += w[i] * (y[i] * eta - _log1pexp(eta))
        if eta >= 0.0:
            mu = 1.0 / (1.0 + math.exp(-eta))
        else:
            ez = math.exp(eta)
            mu = ez / (1.0 + ez)
        res = w[i] * (y[i] - mu)
        sv = math.sqrt(w[i] * mu * (1.0 - mu))
        for q in range(p):
            score[q] += res * X[i, q]
            scaled[i, q] = X[i, q] * sv
    return loglik, score, np.dot(scaled.T, scaled)


def _logistic_eval_numpy(X, y, w, beta):
    eta = X @ beta
    mu = 0.5 * (1.0 + np.tanh(0.5 * eta))
    loglik = np.sum(w * (y * eta - np.logaddexp(0.0, eta)))
    score = X.T @ (w * (y - mu))
    info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
    return float(loglik), score, 0.5 * (info + info.T)


def logistic_eval(X, y, w, beta):
    """Return ``(loglik, score, information)`` of a weighted logistic model."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if get_backend() == "numba":
        loglik, score, info = _logistic_eval_numba(X, y, w, beta)
        return float(loglik), score, 0.5 * (info + info.T)
    return _logistic_eval_numpy(X, y, w, beta)
