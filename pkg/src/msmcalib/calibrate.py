"""Exponential-tilting calibration of initial weights.

Calibrated weights are ``w0 * exp(K lam)``. The restrictions
``K^T w* = l`` are the stationarity conditions of the convex objective
``sum(w0 * exp(K lam)) - l^T lam``, minimized here by damped Newton steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from ._kernels import tilt_eval
from .errors import DataError
from .restrictions import RestrictionSystem
from .weights import WeightMatrix

LAMBDA_NORM_LIMIT = 1e4
STALL_LIMIT = 20
MAX_HALVINGS = 30


class StepTooLarge(ArithmeticError):
    """Raised when some |K_i . lam| exceeds the exp() overflow guard."""


def objective_grad_hess(w0, K, l, lam) -> Tuple[float, np.ndarray, np.ndarray]:
    """Objective, gradient ``K^T (w0 exp(K lam)) - l`` and Hessian of the tilt objective."""
    w0 = np.asarray(w0, dtype=np.float64)
    if np.any(w0 <= 0):
        raise DataError("initial weights must be positive")
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    ok, obj, grad, hess = tilt_eval(w0, K, np.asarray(lam, dtype=np.float64), np.asarray(l, dtype=np.float64))
    if not ok:
        raise StepTooLarge("|K lam| exceeds the overflow guard")
    return obj, grad, hess


@dataclass(frozen=True, eq=False)
class CalibrationSolution:
    lam: np.ndarray
    labels: Tuple[str, ...]
    iterations: int
    final_residual_inf: float
    objective_value: float
    converged: bool
    infeasible: bool
    tolerance: float
    jitter_used: bool = False
    message: str = ""
    history: Tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "lambda": dict(zip(self.labels, map(float, self.lam))),
            "iterations": self.iterations,
            "final_residual_inf": self.final_residual_inf,
            "objective_value": self.objective_value,
            "converged": self.converged,
            "infeasible": self.infeasible,
            "tolerance": self.tolerance,
            "jitter_used": self.jitter_used,
            "message": self.message,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)


def _newton_step(hess: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, bool]:
    try:
        c = linalg.cho_factor(hess, check_finite=False)
        return -linalg.cho_solve(c, grad, check_finite=False), False
    except linalg.LinAlgError:
        r = hess.shape[0]
        jitter = 1e-10 * np.trace(hess) / max(r, 1)
        try:
            c = linalg.cho_factor(hess + jitter * np.eye(r), check_finite=False)
            return -linalg.cho_solve(c, grad, check_finite=False), True
        except linalg.LinAlgError:
            return -np.linalg.lstsq(hess, grad, rcond=None)[0], True


def solve(
    w0: Union[np.ndarray, WeightMatrix],
    system: RestrictionSystem,
    *,
    tol: float = 1e-8,
    max_iter: int = 100,
    lam0: Optional[np.ndarray] = None,
) -> CalibrationSolution:
    """Minimize the tilt objective from ``lam0`` (default zero).

    Converged when ``max|K^T w* - l| <= tol * max(1, max|l|)``. Flags the
    problem infeasible when ``|lam|`` exceeds 1e4, the gradient norm fails
    to decrease over 20 consecutive damped steps, or every step-halving
    candidate trips the overflow guard.
    """
    if isinstance(w0, WeightMatrix):
        w0 = w0.values[system.rows.subjects, system.rows.visits]
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (system.m,):
        raise DataError(f"weight vector has {w0.size} entries, system has {system.m} rows")
    if np.any(~np.isfinite(w0)) or np.any(w0 <= 0):
        raise DataError("initial weights must be finite and positive")
    K, l = system.K, system.l
    r = system.r
    threshold = tol * max(1.0, float(np.max(np.abs(l))) if r else 1.0)

    lam = np.zeros(r) if lam0 is None else np.array(lam0, dtype=np.float64)
    ok, f, g, H = tilt_eval(w0, K, lam, l)
    if not ok:
        lam = np.zeros(r)
        ok, f, g, H = tilt_eval(w0, K, lam, l)

    it, stall = 0, 0
    jitter_used = False
    converged = infeasible = False
    message = ""
    history = []
    while True:
        gmax = float(np.max(np.abs(g))) if r else 0.0
        history.append(gmax)
        if gmax <= threshold:
            converged = True
            break
        if it >= max_iter:
            message = f"no convergence after {max_iter} iterations"
            break
        it += 1
        step, jit = _newton_step(H, g)
        jitter_used |= jit
        t = 1.0
        accepted = False
        guarded = True
        for _ in range(MAX_HALVINGS + 1):
            cand = lam + t * step
            ok_c, f_c, g_c, H_c = tilt_eval(w0, K, cand, l)
            guarded &= not ok_c
            if ok_c and np.isfinite(f_c) and f_c <= f + 1e-14 * max(1.0, abs(f)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if guarded:
                # even a 2^-30 fraction of the Newton step leaves exp() range:
                # the minimizer runs off to infinity
                infeasible = True
                message = "tilt coefficients diverged: no positive reweighting satisfies the restrictions"
            else:
                message = "line search failed to decrease the objective"
            break
        damped = t < 1.0
        if damped and np.linalg.norm(g_c) >= np.linalg.norm(g):
            stall += 1
        else:
            stall = 0
        lam, f, g, H = cand, f_c, g_c, H_c
        if np.max(np.abs(lam)) > LAMBDA_NORM_LIMIT:
            infeasible = True
            message = "tilt coefficients diverged: no positive reweighting satisfies the restrictions"
            break
        if stall >= STALL_LIMIT:
            infeasible = True
            message = "objective unbounded below: gradient stalled over damped steps"
            break

    lam.setflags(write=False)
    return CalibrationSolution(
        lam,
        system.labels,
        it,
        float(np.max(np.abs(g))) if r else 0.0,
        float(f),
        converged,
        infeasible,
        threshold,
        jitter_used,
        message,
        tuple(history),
    )


def tilt(w0: np.ndarray, K: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Calibrated weight vector ``w0 * exp(K lam)``."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    lam = np.asarray(lam, dtype=np.float64)
    if K.shape[1] != lam.size or K.shape[0] != np.size(w0):
        raise DataError("shape mismatch between weights, restriction matrix and tilt coefficients")
    return np.asarray(w0, dtype=np.float64) * np.exp(K @ lam)


def apply(w0: WeightMatrix, system: RestrictionSystem, solution: CalibrationSolution) -> WeightMatrix:
    """Calibrated `WeightMatrix` from initial weights and a solution."""
    if system.rows.shape_nt != w0.values.shape or not np.array_equal(
        np.flatnonzero(w0.mask), np.ravel_multi_index((system.rows.subjects, system.rows.visits), w0.values.shape)
    ):
        raise DataError("restriction rows do not match the weight mask")
    s, v = system.rows.subjects, system.rows.visits
    values = np.array(w0.values, copy=True)
    values[s, v] = tilt(w0.values[s, v], system.K, solution.lam)
    return w0.with_values(
        values,
        kind="calibrated",
        calibration={
            "lambda": dict(zip(solution.labels, map(float, solution.lam))),
            "restrictions": list(system.labels),
            "initial_kind": w0.kind,
            "converged": solution.converged,
        },
    )


@dataclass(frozen=True)
class ImbalanceReport:
    labels: Tuple[str, ...]
    residuals: np.ndarray
    multiplier_mean: float
    multiplier_sd: float

    def rows(self) -> Sequence[Tuple[str, float]]:
        return list(zip(self.labels, map(float, self.residuals)))


def imbalance(
    w: Union[np.ndarray, WeightMatrix],
    system: RestrictionSystem,
    lam: Optional[np.ndarray] = None,
) -> ImbalanceReport:
    """Per-restriction imbalance ``(K^T w - l) / m`` and tilt-multiplier summary.

    The multiplier summary describes ``exp(K lam)``; with ``lam`` omitted it
    is the trivial calibration (mean 1, sd 0).
    """
    resid = system.residual(w) / max(system.m, 1)
    mult = np.exp(system.K @ lam) if lam is not None else np.ones(system.m)
    sd = float(np.std(mult, ddof=1)) if mult.size > 1 else 0.0
    return ImbalanceReport(system.labels, resid, float(np.mean(mult)), sd)
