"""Maximum-likelihood inverse probability weights.

Treatment and censoring models are fitted pooled over visits; weights are
cumulative products over visits of per-visit likelihood ratios.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from os import PathLike
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .dataset import LongitudinalDataset
from .design import DesignSpec, build_design
from .errors import DataError, PositivityWarning
from .glm import (
    PROB_CLAMP,
    HetNormalFit,
    LogisticFit,
    fit_hetnormal,
    fit_logistic,
    normal_density,
    predict_hetnormal,
    predict_prob,
)

WEIGHT_KINDS = ("treatment_stabilized", "censor_unstabilized", "censor_stabilized", "joint", "calibrated")
SCALINGS = ("none", "per_visit_to_n", "total_to_nT")


def _default_visits(data: LongitudinalDataset, visits) -> Tuple[int, int]:
    lo, hi = visits if visits is not None else (1, data.T)
    if not (1 <= lo <= hi <= data.T):
        raise DataError(f"model visit range ({lo}, {hi}) outside 1..{data.T}")
    return lo, hi


def _scatter(design, values, shape) -> np.ndarray:
    out = np.full(shape, np.nan)
    out[design.subjects, design.visits] = values
    return out


@dataclass(frozen=True, eq=False)
class TreatmentModel:
    """Fitted treatment model pooled over ``visits``.

    ``formulas`` holds ``a0`` (and ``a1`` for ordinal3) logistic formulas,
    or ``mean`` and ``logvar`` formulas for a continuous treatment.
    """

    kind: str
    formulas: Mapping[str, str]
    fits: Mapping[str, Union[LogisticFit, HetNormalFit]]
    visits: Tuple[int, int]
    clamped: int = 0

    def predictions(self, data: LongitudinalDataset) -> Dict[str, np.ndarray]:
        """Per-(subject, visit) fitted quantities; NaN where the model does not apply.

        Ordinal/binary: ``a0`` = pr(A0 = 1 | history) and ``a1`` =
        pr(A1 = 1 | history, A0 = 1). Continuous: ``mean`` and ``var``.
        """
        shape = (data.n, data.T + 1)
        if self.kind == "continuous":
            dm = build_design(data, DesignSpec(self.formulas["mean"], "a"), self.visits)
            ds = build_design(data, DesignSpec(self.formulas["logvar"], "a"), self.visits)
            mean, var = predict_hetnormal(self.fits["a"], dm, ds)
            return {"mean": _scatter(dm, mean, shape), "var": _scatter(ds, var, shape)}
        out = {}
        for part in ("a0", "a1"):
            if part in self.fits:
                d = build_design(data, DesignSpec(self.formulas[part], part), self.visits)
                out[part] = _scatter(d, predict_prob(self.fits[part], d), shape)
        return out

    def likelihood(self, data: LongitudinalDataset) -> Tuple[np.ndarray, int]:
        """Likelihood of the observed treatment at each visit, and the clamp count."""
        pred = self.predictions(data)
        if self.kind == "continuous":
            a = data["a"]
            return normal_density(a, pred["mean"], pred["var"]), 0
        a0 = data["a0"]
        e0 = pred["a0"]
        lik = np.where(a0 == 1, e0, 1.0 - e0)
        clamped = np.nan_to_num((e0 <= PROB_CLAMP) | (e0 >= 1 - PROB_CLAMP)).astype(bool)
        if self.kind == "ordinal3":
            a1 = data["a1"]
            e1 = pred["a1"]
            lik1 = np.where(a1 == 1, e1, 1.0 - e1)
            lik = lik * np.where(a0 == 1, lik1, 1.0)
            clamped |= np.nan_to_num((a0 == 1) & ((e1 <= PROB_CLAMP) | (e1 >= 1 - PROB_CLAMP))).astype(bool)
        return lik, int(clamped.sum())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "visits": list(self.visits),
            "formulas": dict(self.formulas),
            "fits": {k: f.to_dict() for k, f in self.fits.items()},
        }


def fit_treatment_model(
    data: LongitudinalDataset,
    formulas: Mapping[str, str],
    visits: Optional[Tuple[int, int]] = None,
) -> TreatmentModel:
    """Fit the ordinal (two nested logistic), binary or continuous treatment model."""
    visits = _default_visits(data, visits)
    kind = data.treatment_kind
    fits = {}
    if kind == "continuous":
        missing = {"mean", "logvar"} - set(formulas)
        if missing:
            raise DataError(f"continuous treatment model needs formulas {sorted(missing)}")
        dm = build_design(data, DesignSpec(formulas["mean"], "a"), visits)
        ds = build_design(data, DesignSpec(formulas["logvar"], "a"), visits)
        fits["a"] = fit_hetnormal(dm, ds)
    else:
        parts = ("a0", "a1") if kind == "ordinal3" else ("a0",)
        for part in parts:
            if part not in formulas:
                raise DataError(f"{kind} treatment model needs a formula for {part!r}")
            subset = "a0" if part == "a1" else None
            fits[part] = fit_logistic(build_design(data, DesignSpec(formulas[part], part, subset), visits))
    return TreatmentModel(kind, dict(formulas), fits, visits)


@dataclass(frozen=True, eq=False)
class CensoringModel:
    """Pooled logistic model for pr(R_j = 1 | history, R_{j-1} = 1)."""

    formula: str
    fit: LogisticFit
    visits: Tuple[int, int]

    def probabilities(self, data: LongitudinalDataset) -> np.ndarray:
        d = build_design(data, DesignSpec(self.formula, "r"), self.visits)
        return _scatter(d, predict_prob(self.fit, d), (data.n, data.T + 1))

    def to_dict(self) -> dict:
        return {"formula": self.formula, "visits": list(self.visits), "fit": self.fit.to_dict()}


def fit_censoring_model(
    data: LongitudinalDataset, formula: str, visits: Optional[Tuple[int, int]] = None
) -> CensoringModel:
    visits = _default_visits(data, visits)
    if visits[0] != 1:
        raise DataError("censoring models must start at visit 1")
    d = build_design(data, DesignSpec(formula, "r"), visits)
    return CensoringModel(formula, fit_logistic(d), visits)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Positive weights per (subject, visit) with an eligibility mask.

    Arrays are ``(n, T + 1)``. Visit 0 carries value 1 and is never masked
    in. ``factors[:, j]`` is the ratio ``values[:, j] / values[:, j - 1]``
    recorded at construction.
    """

    ids: Tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray
    factors: np.ndarray
    kind: str
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise DataError(f"unknown weight kind {self.kind!r}")
        for name in ("values", "mask", "factors"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.values.shape != self.mask.shape:
            raise DataError("weight values and mask shapes differ")
        vals = self.values[self.mask]
        if vals.size and not (np.all(np.isfinite(vals)) and np.all(vals > 0)):
            raise DataError("weights must be finite and positive wherever the mask is set")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1] - 1

    def rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Masked-in (subject, visit) pairs, subject-major."""
        return np.nonzero(self.mask)

    def vector(self) -> np.ndarray:
        return self.values[self.mask]

    def visit_sums(self) -> np.ndarray:
        return np.where(self.mask, self.values, 0.0).sum(axis=0)

    def with_values(self, values: np.ndarray, kind: Optional[str] = None, **prov) -> "WeightMatrix":
        values = np.where(self.mask, values, np.nan)
        values[:, 0] = 1.0
        return replace(
            self,
            values=values,
            factors=_ratios(values),
            kind=kind or self.kind,
            provenance={**self.provenance, **prov},
        )


def _ratios(values: np.ndarray) -> np.ndarray:
    f = np.full(values.shape, np.nan)
    f[:, 0] = 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        f[:, 1:] = values[:, 1:] / values[:, :-1]
    return f


def _cumulative(ids, factors: np.ndarray, mask: np.ndarray, kind: str, provenance) -> WeightMatrix:
    factors = np.where(mask, factors, np.nan)
    factors[:, 0] = 1.0
    values = np.cumprod(np.where(np.isnan(factors), 1.0, factors), axis=1)
    values = np.where(mask, values, np.nan)
    values[:, 0] = 1.0
    return WeightMatrix(tuple(ids), values, mask, factors, kind, dict(provenance))


def _check_positivity(clamped: int, total: int, max_clamped_fraction: float, what: str) -> None:
    if total and clamped / total > max_clamped_fraction:
        warnings.warn(
            f"{what}: probability clamp triggered on {clamped} of {total} rows (positivity concern)",
            PositivityWarning,
            stacklevel=3,
        )


def treatment_weights(
    data: LongitudinalDataset,
    numerator: TreatmentModel,
    denominator: TreatmentModel,
    *,
    max_clamped_fraction: float = 0.0,
) -> WeightMatrix:
    """Stabilized treatment weights: cumulative numerator/denominator likelihood ratios."""
    if numerator.visits != denominator.visits:
        raise DataError("numerator and denominator models must cover the same visits")
    lo, hi = numerator.visits
    num, c_num = numerator.likelihood(data)
    den, c_den = denominator.likelihood(data)
    mask = np.zeros((data.n, data.T + 1), dtype=bool)
    mask[:, lo : hi + 1] = data.r[:, lo : hi + 1] == 1
    factors = np.where(mask, num / den, np.nan)
    _check_positivity(c_num + c_den, int(mask.sum()), max_clamped_fraction, "treatment weights")
    return _cumulative(
        data.ids,
        factors,
        mask,
        "treatment_stabilized",
        {
            "numerator": numerator.to_dict(),
            "denominator": denominator.to_dict(),
            "clamped_rows": c_num + c_den,
            "scaling": "none",
        },
    )


def censoring_weights(
    data: LongitudinalDataset,
    model: CensoringModel,
    stabilizer: Optional[CensoringModel] = None,
    *,
    max_clamped_fraction: float = 0.0,
) -> WeightMatrix:
    """Inverse probability of censoring weights on rows with r = 1.

    With ``stabilizer`` (a treatment-history-only censoring model) each
    visit factor is multiplied by its fitted probability.
    """
    lo, hi = model.visits
    pi = model.probabilities(data)
    mask = np.zeros((data.n, data.T + 1), dtype=bool)
    mask[:, lo : hi + 1] = data.r[:, lo : hi + 1] == 1
    factors = 1.0 / pi
    clamped = int(np.sum(mask & ((pi <= PROB_CLAMP) | (pi >= 1 - PROB_CLAMP))))
    prov = {"censoring": model.to_dict(), "clamped_rows": clamped, "scaling": "none"}
    kind = "censor_unstabilized"
    if stabilizer is not None:
        if stabilizer.visits != model.visits:
            raise DataError("stabilizer and censoring models must cover the same visits")
        pis = stabilizer.probabilities(data)
        factors = factors * pis
        clamped += int(np.sum(mask & ((pis <= PROB_CLAMP) | (pis >= 1 - PROB_CLAMP))))
        prov["stabilizer"] = stabilizer.to_dict()
        prov["clamped_rows"] = clamped
        kind = "censor_stabilized"
    _check_positivity(clamped, int(mask.sum()), max_clamped_fraction, "censoring weights")
    return _cumulative(data.ids, factors, mask, kind, prov)


def combine_and_scale(
    tw: WeightMatrix, cw: Optional[WeightMatrix] = None, scaling: str = "none"
) -> WeightMatrix:
    """Elementwise product of treatment and censoring weights, then optional rescaling.

    ``per_visit_to_n`` makes each visit's weights sum to its eligible count;
    ``total_to_nT`` makes the grand sum equal n times the number of visits.
    """
    if scaling not in SCALINGS:
        raise DataError(f"unknown scaling {scaling!r}")
    out = tw
    if cw is not None:
        if cw.values.shape != tw.values.shape:
            raise DataError("treatment and censoring weight matrices differ in shape")
        if np.any(cw.mask & ~tw.mask):
            raise DataError("incompatible masks: censoring weights defined where treatment weights are not")
        mask = cw.mask
        factors = np.where(mask, tw.factors * cw.factors, np.nan)
        values = np.where(mask, tw.values * cw.values, np.nan)
        values[:, 0] = 1.0
        out = WeightMatrix(
            tw.ids,
            values,
            mask,
            factors,
            "joint",
            {"treatment": dict(tw.provenance), "censoring": dict(cw.provenance), "scaling": "none"},
        )
    if scaling == "none":
        return out
    vals = np.where(out.mask, out.values, 0.0)
    if scaling == "per_visit_to_n":
        counts = out.mask.sum(axis=0)
        sums = vals.sum(axis=0)
        scale = np.divide(counts, sums, out=np.ones(sums.shape), where=sums > 0)
        new = out.values * scale[None, :]
    else:
        visits = np.flatnonzero(out.mask.any(axis=0))
        target = out.n * visits.size
        new = out.values * (target / vals.sum())
    return out.with_values(new, scaling=scaling)


def write_weights(w: WeightMatrix, path: Union[str, PathLike]) -> None:
    """CSV with columns ``id,visit,weight,mask,kind`` for visits 1..T."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["id", "visit", "weight", "mask", "kind"])
        for i, sid in enumerate(w.ids):
            for j in range(1, w.T + 1):
                m = bool(w.mask[i, j])
                out.writerow([sid, j, repr(float(w.values[i, j])) if m else "", int(m), w.kind])


def read_weights(path: Union[str, PathLike], ids, T: int) -> WeightMatrix:
    """Read a weight CSV aligned to the subject order ``ids``."""
    index = {sid: i for i, sid in enumerate(ids)}
    values = np.full((len(index), T + 1), np.nan)
    mask = np.zeros(values.shape, dtype=bool)
    kinds = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line, rec in enumerate(reader, start=2):
            try:
                i = index[rec["id"]]
                j = int(rec["visit"])
                m = int(rec["mask"])
            except KeyError:
                raise DataError(f"line {line}: unknown subject {rec.get('id')!r} or missing column") from None
            except ValueError:
                raise DataError(f"line {line}: malformed visit or mask") from None
            if not 1 <= j <= T:
                raise DataError(f"line {line}: visit {j} outside 1..{T}")
            if m:
                try:
                    values[i, j] = float(rec["weight"])
                except ValueError:
                    raise DataError(f"line {line}: malformed weight {rec['weight']!r}") from None
                mask[i, j] = True
            kinds.add(rec["kind"])
    if len(kinds) > 1:
        raise DataError(f"weight file mixes kinds {sorted(kinds)}")
    kind = kinds.pop() if kinds else "joint"
    values[:, 0] = 1.0
    return WeightMatrix(tuple(ids), values, mask, _ratios(values), kind, {"source": str(path)})
