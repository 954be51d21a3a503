"""End-to-end estimation: weight models, initial weights, restrictions,
calibration and the weighted MSM fit."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import calibrate as cal
from .dataset import LongitudinalDataset, cumulative, parse_linear_terms
from .errors import DataError, InfeasibleCalibrationError, ConvergenceError
from .msm import MsmEstimate, MsmSpec, fit_msm
from .restrictions import (
    RestrictionSystem,
    RowIndex,
    assemble_joint,
    censoring_restrictions,
    continuous_treatment_restrictions,
    normalization_restrictions,
    ordinal_treatment_restrictions,
)
from .weights import (
    WeightMatrix,
    censoring_weights,
    combine_and_scale,
    fit_censoring_model,
    fit_treatment_model,
    treatment_weights,
)

NORMALIZATIONS = ("per_visit", "single", "none")


@dataclass(frozen=True)
class PipelineConfig:
    """Model formulas and options for one estimation run.

    ``numerator`` / ``denominator`` map treatment parts (``a0``, ``a1`` or
    ``mean``, ``logvar``) to formulas. Probe formulas default to the
    denominator and censoring formulas. ``derived`` defines cumulative
    columns added before the MSM fit, e.g. ``{"cum_a1": "a1"}``.
    """

    numerator: Mapping[str, str]
    denominator: Mapping[str, str]
    msm_formula: str
    censoring: Optional[str] = None
    stabilizer: Optional[str] = None
    probe_treatment: Optional[Mapping[str, str]] = None
    probe_censoring: Optional[str] = None
    normalization: str = "per_visit"
    target: str = "repeated"
    scaling: str = "none"
    calibrate: bool = True
    treatment_restrictions: bool = True
    derived: Mapping[str, str] = field(default_factory=dict)
    treatment_terms: Tuple[str, ...] = ()
    visits: Optional[Tuple[int, int]] = None
    tol: float = 1e-8

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise DataError(f"unknown normalization {self.normalization!r}")
        if self.stabilizer is not None and self.censoring is None:
            raise DataError("a censoring stabilizer needs a censoring model")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (dict(v) if isinstance(v, Mapping) else list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass(frozen=True, eq=False)
class PipelineResult:
    initial: WeightMatrix
    calibrated: Optional[WeightMatrix]
    system: Optional[RestrictionSystem]
    solution: Optional[cal.CalibrationSolution]
    mle: MsmEstimate
    cmle: Optional[MsmEstimate]


def add_derived(data: LongitudinalDataset, derived: Mapping[str, str]) -> LongitudinalDataset:
    """Append cumulative columns ``name = sum_{t<=j} expr_t``."""
    if not derived:
        return data
    return data.with_columns(**{name: cumulative(data, parse_linear_terms(expr)) for name, expr in derived.items()})


def initial_weights(data: LongitudinalDataset, cfg: PipelineConfig):
    """Fit weight models and return ``(weights, numerator_model, stabilizer_model)``."""
    num = fit_treatment_model(data, cfg.numerator, cfg.visits)
    den = fit_treatment_model(data, cfg.denominator, cfg.visits)
    w = treatment_weights(data, num, den)
    stab = None
    if cfg.censoring is not None:
        cens = fit_censoring_model(data, cfg.censoring, cfg.visits)
        if cfg.stabilizer is not None:
            stab = fit_censoring_model(data, cfg.stabilizer, cfg.visits)
        w = combine_and_scale(w, censoring_weights(data, cens, stab))
    return combine_and_scale(w, scaling=cfg.scaling), num, stab


def build_system(data, cfg: PipelineConfig, w0: WeightMatrix, numerator, stabilizer=None) -> RestrictionSystem:
    rows = RowIndex.from_weights(w0)
    lo, hi = cfg.visits or (1, data.T)
    parts = []
    if cfg.treatment_restrictions:
        probe = cfg.probe_treatment or cfg.denominator
        if data.treatment_kind == "continuous":
            parts.append(continuous_treatment_restrictions(data, rows, numerator, probe, cfg.target))
        else:
            parts.append(ordinal_treatment_restrictions(data, rows, numerator, probe, cfg.target))
    if cfg.normalization != "none":
        only = [hi] if cfg.target == "eventual" else None
        parts.append(normalization_restrictions(rows, cfg.normalization == "per_visit", only))
    if cfg.censoring is not None:
        parts.append(
            censoring_restrictions(
                data, rows, cfg.probe_censoring or cfg.censoring, cfg.target, stabilizer, (lo, hi)
            )
        )
    return assemble_joint(parts)


def calibrate_weights(data, cfg: PipelineConfig, w0: WeightMatrix, numerator, stabilizer=None):
    """Build the restriction system and solve it; raises on failure."""
    system = build_system(data, cfg, w0, numerator, stabilizer)
    sol = cal.solve(w0, system, tol=cfg.tol)
    if sol.infeasible:
        raise InfeasibleCalibrationError(sol.message)
    if not sol.converged:
        raise ConvergenceError(f"calibration: {sol.message}")
    return cal.apply(w0, system, sol), system, sol


def run_pipeline(data: LongitudinalDataset, cfg: PipelineConfig) -> PipelineResult:
    data = add_derived(data, cfg.derived)
    w0, num, stab = initial_weights(data, cfg)
    spec = MsmSpec(cfg.msm_formula, tuple(cfg.treatment_terms), cfg.visits)
    mle = fit_msm(data, spec, w0)
    if not cfg.calibrate:
        return PipelineResult(w0, None, None, None, mle, None)
    w1, system, sol = calibrate_weights(data, cfg, w0, num, stab)
    return PipelineResult(w0, w1, system, sol, mle, fit_msm(data, spec, w1))


@dataclass(frozen=True)
class CoefficientPipeline:
    """Picklable closure for `bootstrap`: returns the chosen estimator's coefficients."""

    cfg: PipelineConfig
    estimator: str = "cmle"

    def __call__(self, data: LongitudinalDataset) -> np.ndarray:
        res = run_pipeline(data, self.cfg)
        est = res.cmle if self.estimator == "cmle" else res.mle
        if est is None:
            raise DataError("calibrated estimator requested with calibration disabled")
        return np.asarray(est.coefficients)


def summarize(result: PipelineResult) -> Dict:
    out = {"mle": result.mle.to_dict()}
    if result.cmle is not None:
        out["cmle"] = result.cmle.to_dict()
        out["calibration"] = result.solution.to_dict()
        out["pruned"] = [list(p) for p in result.system.pruned]
    return out
