"""Maximum-likelihood fitters for treatment and censoring models."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from ._kernels import logistic_eval
from .design import DesignMatrix
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateVarianceError,
    RankDeficiencyError,
    SeparationWarning,
)

PROB_CLAMP = 1e-12
SEPARATION_BOUND = 15.0
LOGVAR_FLOOR = -30.0
ROUNDOFF_FACTOR = 16.0


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coefficients: np.ndarray
    columns: Tuple[str, ...]
    converged: bool
    iterations: int
    max_abs_score: float
    separated: bool = False

    def to_dict(self) -> dict:
        return {
            "family": "logistic",
            "coefficients": dict(zip(self.columns, map(float, self.coefficients))),
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_score": self.max_abs_score,
            "separated": self.separated,
        }


@dataclass(frozen=True, eq=False)
class HetNormalFit:
    mean_coefficients: np.ndarray
    logvar_coefficients: np.ndarray
    mean_columns: Tuple[str, ...]
    logvar_columns: Tuple[str, ...]
    converged: bool
    iterations: int
    max_abs_score: float = field(default=0.0)

    def to_dict(self) -> dict:
        return {
            "family": "heteroscedastic_normal",
            "mean_coefficients": dict(zip(self.mean_columns, map(float, self.mean_coefficients))),
            "logvar_coefficients": dict(zip(self.logvar_columns, map(float, self.logvar_coefficients))),
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_score": self.max_abs_score,
        }


def _as_matrix(X, columns=None) -> Tuple[np.ndarray, Tuple[str, ...]]:
    if isinstance(X, DesignMatrix):
        return np.asarray(X.values, dtype=np.float64), X.columns
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if columns is None:
        columns = tuple(f"x{q}" for q in range(X.shape[1]))
    return X, tuple(columns)


def check_rank(X: np.ndarray, columns: Sequence[str], rtol: Optional[float] = None) -> None:
    """Raise `RankDeficiencyError` naming the columns a pivoted QR finds dependent."""
    if len(set(columns)) != len(columns):
        dup = sorted({c for c in columns if list(columns).count(c) > 1})
        raise RankDeficiencyError(f"duplicate design columns {dup}", dup)
    n, p = X.shape
    if p == 0:
        return
    if n < p:
        raise RankDeficiencyError(f"design has {n} rows but {p} columns", columns[n:])
    norms = np.linalg.norm(X, axis=0)
    zero = [columns[q] for q in range(p) if norms[q] == 0]
    if zero:
        raise RankDeficiencyError(f"design columns {zero} are identically zero", zero)
    _, R, piv = linalg.qr(X / norms, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = rtol if rtol is not None else max(n, p) * np.finfo(float).eps * 10
    rank = int(np.sum(d > tol * d[0]))
    if rank < p:
        dependent = [columns[q] for q in sorted(piv[rank:])]
        raise RankDeficiencyError(f"design is rank deficient; dependent columns {dependent}", dependent)


def _newton_direction(info: np.ndarray, score: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(info, check_finite=False)
        return linalg.cho_solve(c, score, check_finite=False)
    except linalg.LinAlgError:
        return np.linalg.lstsq(info, score, rcond=None)[0]


def fit_logistic(
    X: Union[DesignMatrix, np.ndarray],
    y: Optional[np.ndarray] = None,
    prior_weights: Optional[np.ndarray] = None,
    *,
    columns: Optional[Sequence[str]] = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> LogisticFit:
    """Weighted logistic regression by Newton-Raphson with step halving.

    ``y`` defaults to the design's response. Starts from zero coefficients
    and stops when the largest absolute score is at most ``tol``, or at
    most the summation roundoff floor ``16 eps max_q sum_i w_i |x_iq|``
    when that is larger (large pooled designs).
    """
    Xm, names = _as_matrix(X, columns)
    if y is None:
        if not isinstance(X, DesignMatrix) or X.response is None:
            raise DataError("no response supplied for logistic fit")
        y = X.response
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (Xm.shape[0],):
        raise DataError("response length does not match design rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("logistic response must be 0/1")
    w = np.ones_like(y) if prior_weights is None else np.asarray(prior_weights, dtype=np.float64)
    if w.shape != y.shape or (w < 0).any() or not np.isfinite(w).all():
        raise DataError("prior weights must be finite, nonnegative and one per row")
    check_rank(Xm[w > 0], names)

    tol = max(tol, ROUNDOFF_FACTOR * np.finfo(float).eps * float(np.max(w @ np.abs(Xm), initial=0.0)))
    beta = np.zeros(Xm.shape[1])
    ll, score, info = logistic_eval(Xm, y, w, beta)
    it = 0
    converged = False
    while True:
        max_score = float(np.max(np.abs(score))) if score.size else 0.0
        if max_score <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        step = _newton_direction(info, score)
        t = 1.0
        for _ in range(31):
            cand = beta + t * step
            ll_new, score_new, info_new = logistic_eval(Xm, y, w, cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            break
        if np.max(np.abs(cand - beta)) <= 1e-15 * (1.0 + np.max(np.abs(beta))):
            # step below floating-point resolution: the score is at its roundoff floor
            beta, ll, score, info = cand, ll_new, score_new, info_new
            max_score = float(np.max(np.abs(score)))
            converged = max_score <= tol
            break
        beta, ll, score, info = cand, ll_new, score_new, info_new

    max_score = float(np.max(np.abs(score))) if score.size else 0.0
    if not converged:
        raise ConvergenceError(
            f"logistic fit did not converge after {it} iterations (max |score| = {max_score:.3g})"
        )
    separated = bool(np.any(np.abs(beta) > SEPARATION_BOUND))
    if separated:
        warnings.warn(
            f"possible quasi-separation: |coefficient| > {SEPARATION_BOUND} in {list(names)}",
            SeparationWarning,
            stacklevel=2,
        )
    beta.setflags(write=False)
    return LogisticFit(beta, names, converged, it, max_score, separated)


def _linear_predictor(coefficients, fit_columns, X, columns=None) -> np.ndarray:
    Xm, names = _as_matrix(X, columns if columns is not None else fit_columns)
    if tuple(names) != tuple(fit_columns):
        raise DataError(f"design columns {list(names)} do not match fitted columns {list(fit_columns)}")
    return Xm @ coefficients


def predict_prob(fit: LogisticFit, X: Union[DesignMatrix, np.ndarray], columns=None) -> np.ndarray:
    """Fitted probabilities, clamped to [1e-12, 1 - 1e-12]."""
    eta = _linear_predictor(fit.coefficients, fit.columns, X, columns)
    p = 0.5 * (1.0 + np.tanh(0.5 * eta))
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def hetnormal_scores(X_mu, X_sigma, a, beta_mu, beta_sigma) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and log-variance score vectors of the heteroscedastic normal likelihood."""
    res = a - X_mu @ beta_mu
    prec = np.exp(-(X_sigma @ beta_sigma))
    s_mu = X_mu.T @ (res * prec)
    s_sigma = 0.5 * X_sigma.T @ (-1.0 + res**2 * prec)
    return s_mu, s_sigma


def _hetnormal_loglik(res, eta):
    return -0.5 * float(np.sum(eta + res**2 * np.exp(-eta)))


def fit_hetnormal(
    X_mu: Union[DesignMatrix, np.ndarray],
    X_sigma: Union[DesignMatrix, np.ndarray],
    a: Optional[np.ndarray] = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> HetNormalFit:
    """Fit A ~ N(X_mu b_mu, exp(X_sigma b_sigma)) by alternating Newton blocks.

    The mean block is an exact weighted least-squares solve given the
    variances; the log-variance block takes one damped Newton step per sweep.
    Convergence uses the same roundoff floor as `fit_logistic`.
    """
    Xm, mu_names = _as_matrix(X_mu)
    Xs, sigma_names = _as_matrix(X_sigma)
    if a is None:
        if not isinstance(X_mu, DesignMatrix) or X_mu.response is None:
            raise DataError("no response supplied for heteroscedastic normal fit")
        a = X_mu.response
    a = np.asarray(a, dtype=np.float64)
    if not (Xm.shape[0] == Xs.shape[0] == a.shape[0]):
        raise DataError("mean design, variance design and response must share rows")
    check_rank(Xm, mu_names)
    check_rank(Xs, sigma_names)

    beta_mu = np.linalg.lstsq(Xm, a, rcond=None)[0]
    res = a - Xm @ beta_mu
    msr = float(np.mean(res**2))
    if msr <= np.exp(LOGVAR_FLOOR):
        raise DegenerateVarianceError(
            "residual variance is zero: the treatment is an exact linear function of the mean design"
        )
    beta_sigma = np.linalg.lstsq(Xs, np.full(a.shape, np.log(msr)), rcond=None)[0]

    it = 0
    converged = False
    max_score = np.inf
    while it <= max_iter:
        eta = Xs @ beta_sigma
        if np.min(eta) < LOGVAR_FLOOR:
            raise DegenerateVarianceError(
                f"fitted log-variance fell below the floor {LOGVAR_FLOOR}"
            )
        prec = np.exp(-eta)
        sw = np.sqrt(prec)
        beta_mu = np.linalg.lstsq(Xm * sw[:, None], a * sw, rcond=None)[0]
        res = a - Xm @ beta_mu
        s_mu, s_sigma = hetnormal_scores(Xm, Xs, a, beta_mu, beta_sigma)
        max_score = float(max(np.max(np.abs(s_mu)), np.max(np.abs(s_sigma))))
        floor = max(
            np.max(np.abs(res * prec) @ np.abs(Xm)),
            0.5 * np.max(np.abs(res**2 * prec - 1.0) @ np.abs(Xs)),
        )
        if max_score <= max(tol, ROUNDOFF_FACTOR * np.finfo(float).eps * floor):
            converged = True
            break
        if it == max_iter:
            break
        it += 1
        z = res**2 * prec
        hess = 0.5 * (Xs * z[:, None]).T @ Xs
        step = _newton_direction(hess, s_sigma)
        ll = _hetnormal_loglik(res, eta)
        t = 1.0
        for _ in range(31):
            cand = beta_sigma + t * step
            if _hetnormal_loglik(res, Xs @ cand) >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        beta_sigma = cand
    if not converged:
        raise ConvergenceError(
            f"heteroscedastic normal fit did not converge after {it} iterations (max |score| = {max_score:.3g})"
        )
    beta_mu.setflags(write=False)
    beta_sigma.setflags(write=False)
    return HetNormalFit(beta_mu, beta_sigma, mu_names, sigma_names, True, it, max_score)


def predict_hetnormal(fit: HetNormalFit, X_mu, X_sigma) -> Tuple[np.ndarray, np.ndarray]:
    """Fitted means and variances."""
    mean = _linear_predictor(fit.mean_coefficients, fit.mean_columns, X_mu)
    var = np.exp(_linear_predictor(fit.logvar_coefficients, fit.logvar_columns, X_sigma))
    return mean, var


def normal_density(a, mean, var) -> np.ndarray:
    return np.exp(-0.5 * (a - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
