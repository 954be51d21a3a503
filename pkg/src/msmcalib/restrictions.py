"""Linear calibration restrictions ``K^T w = l`` over the weight vector.

Each row of ``K`` belongs to one calibrated weight (subject, visit); each
column is one restriction. Treatment families come from inverting the
score of a probe treatment model at "no covariate dependence"; censoring
families from a logistic probe censoring model at pr = 1/2, written with
the uncalibrated terms moved to ``l``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from os import PathLike
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import LongitudinalDataset
from .design import DesignSpec, build_design
from .errors import DataError, DegenerateVarianceError
from .weights import CensoringModel, TreatmentModel, WeightMatrix

ZERO_COLUMN_TOL = 1e-10
DEPENDENCE_RTOL = 1e-10
TARGETS = ("repeated", "eventual")


@dataclass(frozen=True)
class RowIndex:
    """(subject, visit) of each calibrated weight, subject-major."""

    subjects: np.ndarray
    visits: np.ndarray
    shape_nt: Tuple[int, int]

    @classmethod
    def from_weights(cls, w: WeightMatrix) -> "RowIndex":
        s, v = w.rows()
        return cls(s, v, w.values.shape)

    @classmethod
    def from_data(cls, data: LongitudinalDataset, visits: Optional[Tuple[int, int]] = None) -> "RowIndex":
        lo, hi = visits if visits is not None else (1, data.T)
        mask = np.zeros((data.n, data.T + 1), dtype=bool)
        mask[:, lo : hi + 1] = data.r[:, lo : hi + 1] == 1
        s, v = np.nonzero(mask)
        return cls(s, v, mask.shape)

    def __len__(self) -> int:
        return self.subjects.size

    def same_as(self, other: "RowIndex") -> bool:
        return (
            self.shape_nt == other.shape_nt
            and np.array_equal(self.subjects, other.subjects)
            and np.array_equal(self.visits, other.visits)
        )


@dataclass(frozen=True, eq=False)
class RestrictionSystem:
    K: np.ndarray
    l: np.ndarray
    rows: RowIndex
    labels: Tuple[str, ...]
    family: Tuple[str, ...]
    probe_spec: Mapping = field(default_factory=dict)
    pruned: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64, copy=True).reshape(len(self.rows), -1)
        l = np.array(self.l, dtype=np.float64, copy=True).reshape(-1)
        if K.shape[1] != l.size or l.size != len(self.labels) or len(self.family) != l.size:
            raise DataError("restriction matrix, target vector and labels disagree in size")
        K.setflags(write=False)
        l.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "l", l)

    @property
    def m(self) -> int:
        return self.K.shape[0]

    @property
    def r(self) -> int:
        return self.K.shape[1]

    def residual(self, w: Union[np.ndarray, WeightMatrix]) -> np.ndarray:
        """``K^T w - l`` for a weight vector aligned with ``rows``."""
        if isinstance(w, WeightMatrix):
            w = w.values[self.rows.subjects, self.rows.visits]
        return self.K.T @ np.asarray(w, dtype=np.float64) - self.l


def _dense_design(data, formula, response, visits):
    d = build_design(data, DesignSpec(formula, response), visits)
    dense, mask = d.dense()
    return dense, mask, d.columns


def _cumulate(terms: np.ndarray, rows: RowIndex, lo: int) -> np.ndarray:
    """Sum of per-visit terms over visits lo..j, read off at each calibrated row."""
    t = terms.copy()
    t[:, :lo] = 0.0
    return np.cumsum(t, axis=1)[rows.subjects, rows.visits]


def _restrict_eventual(K: np.ndarray, rows: RowIndex, target: str, hi: int) -> np.ndarray:
    if target == "eventual":
        K = K * (rows.visits == hi)[:, None]
    return K


def ordinal_treatment_restrictions(
    data: LongitudinalDataset,
    rows: RowIndex,
    numerator: TreatmentModel,
    probe_formulas: Mapping[str, str],
    target: str = "repeated",
) -> RestrictionSystem:
    """Balance restrictions from a nested-logistic probe treatment model.

    Column q of the ``a0`` part has row (i, j) entry
    ``sum_{k<=j} (A0_ik - e0_ik) X0_{i,k-1,q}``; the ``a1`` part uses
    ``A0_ik (A1_ik - e1_ik) X1_{i,k-1,q}``. ``e0``/``e1`` are the numerator
    (treatment-history-only) fitted probabilities. Binary treatment uses
    the ``a0`` part alone.
    """
    if target not in TARGETS:
        raise DataError(f"unknown target {target!r}")
    if numerator.kind == "continuous":
        raise DataError("ordinal restrictions need a binary or ordinal treatment model")
    lo, hi = numerator.visits
    pred = numerator.predictions(data)
    parts = ("a0", "a1") if numerator.kind == "ordinal3" else ("a0",)
    blocks, labels = [], []
    a0 = np.nan_to_num(data["a0"])
    for part in parts:
        if part not in probe_formulas:
            raise DataError(f"missing probe formula for {part!r}")
        X, xmask, cols = _dense_design(data, probe_formulas[part], part, (lo, hi))
        if part == "a0":
            resid = a0 - pred["a0"]
        else:
            resid = a0 * (np.nan_to_num(data["a1"]) - np.nan_to_num(pred["a1"]))
        resid = np.where(xmask, np.nan_to_num(resid), 0.0)
        blocks.append(_cumulate(resid[:, :, None] * X, rows, lo))
        labels += [f"treat[{part}]:{c}" for c in cols]
    K = _restrict_eventual(np.hstack(blocks), rows, target, hi)
    return RestrictionSystem(
        K,
        np.zeros(K.shape[1]),
        rows,
        tuple(labels),
        ("treatment",) * K.shape[1],
        {"family": "ordinal_treatment", "probe_formulas": dict(probe_formulas), "target": target},
    )


def continuous_treatment_restrictions(
    data: LongitudinalDataset,
    rows: RowIndex,
    numerator: TreatmentModel,
    probe_formulas: Mapping[str, str],
    target: str = "repeated",
) -> RestrictionSystem:
    """Restrictions from a heteroscedastic normal probe model.

    Mean columns: ``sum_{k<=j} (A_ik - mu_ik) / s2_ik * Xmu``; variance
    columns: ``sum_{k<=j} (-1 + (A_ik - mu_ik)^2 / s2_ik) * Xsigma``.
    """
    if numerator.kind != "continuous":
        raise DataError("continuous restrictions need a continuous treatment model")
    lo, hi = numerator.visits
    pred = numerator.predictions(data)
    mean, var = pred["mean"], pred["var"]
    observed = ~np.isnan(var)
    if np.any(var[observed] < 1e-12):
        raise DegenerateVarianceError("fitted treatment variance below 1e-12")
    a = data["a"]
    Xm, mmask, mcols = _dense_design(data, probe_formulas["mean"], "a", (lo, hi))
    Xs, smask, scols = _dense_design(data, probe_formulas["logvar"], "a", (lo, hi))
    with np.errstate(invalid="ignore"):
        z = (a - mean) / var
        zs = -1.0 + (a - mean) ** 2 / var
    z = np.where(mmask, np.nan_to_num(z), 0.0)
    zs = np.where(smask, np.nan_to_num(zs), 0.0)
    K = np.hstack([_cumulate(z[:, :, None] * Xm, rows, lo), _cumulate(zs[:, :, None] * Xs, rows, lo)])
    K = _restrict_eventual(K, rows, target, hi)
    labels = tuple(f"treat[mean]:{c}" for c in mcols) + tuple(f"treat[logvar]:{c}" for c in scols)
    return RestrictionSystem(
        K,
        np.zeros(K.shape[1]),
        rows,
        labels,
        ("treatment",) * K.shape[1],
        {"family": "continuous_treatment", "probe_formulas": dict(probe_formulas), "target": target},
    )


def normalization_restrictions(
    rows: RowIndex, per_visit: bool = True, visits: Optional[Sequence[int]] = None
) -> RestrictionSystem:
    """Mean-one restrictions: per visit (l = eligible count) or one overall (l = m).

    ``visits`` limits per-visit columns to the listed visits (eventual target).
    """
    m = len(rows)
    if not per_visit:
        sel = np.ones(m) if visits is None else np.isin(rows.visits, list(visits)).astype(float)
        return RestrictionSystem(
            sel[:, None], [sel.sum()], rows, ("normalize:all",), ("normalization",), {"family": "normalization"}
        )
    levels = sorted(set(rows.visits.tolist())) if visits is None else list(visits)
    K = np.column_stack([(rows.visits == v).astype(float) for v in levels])
    return RestrictionSystem(
        K,
        K.sum(axis=0),
        rows,
        tuple(f"normalize:visit[{v}]" for v in levels),
        ("normalization",) * len(levels),
        {"family": "normalization", "per_visit": True},
    )


def censoring_restrictions(
    data: LongitudinalDataset,
    rows: RowIndex,
    formula: str,
    target: str = "repeated",
    stabilizer: Optional[CensoringModel] = None,
    visits: Optional[Tuple[int, int]] = None,
) -> RestrictionSystem:
    """Representativeness restrictions from a logistic probe censoring model.

    ``formula`` defines the probe design H evaluated for the response R_j
    (so lag-1 terms refer to visit j - 1). Repeated target: row (i, j) gets
    ``(T-j+1) H_{i,j-1} - (T-j) H_{i,j}`` and ``l = T sum_i H_{i,0}``.
    Eventual target: ``H_{i,j-1} - [j<T] H_{i,j}`` and ``l = sum_i H_{i,0}``.
    A ``stabilizer`` multiplies the ``H_{i,j}`` term and the ``l`` summands by
    its fitted probabilities (repeated target only).
    """
    if target not in TARGETS:
        raise DataError(f"unknown target {target!r}")
    lo, hi = visits if visits is not None else (1, data.T)
    if lo != 1:
        raise DataError("censoring restrictions require the visit range to start at 1")
    if np.any((rows.visits < lo) | (rows.visits > hi)):
        raise DataError("calibrated rows fall outside the censoring visit range")
    if not np.all(data.r[rows.subjects, rows.visits] == 1):
        raise DataError("censoring restrictions apply to observed (r = 1) rows only")
    T = hi
    H, hmask, cols = _dense_design(data, formula, "r", (lo, hi))
    pis = np.ones((data.n, data.T + 1))
    if stabilizer is not None:
        if target != "repeated":
            raise DataError("stabilized censoring restrictions are defined for the repeated target only")
        pis = np.nan_to_num(stabilizer.probabilities(data), nan=0.0)
    s, j = rows.subjects, rows.visits
    current = H[s, j]
    nxt = np.zeros_like(current)
    inner = j < T
    nxt[inner] = H[s[inner], j[inner] + 1] * pis[s[inner], j[inner] + 1][:, None]
    if target == "repeated":
        K = (T - j + 1)[:, None] * current - (T - j)[:, None] * nxt
        l = T * (pis[:, 1][:, None] * H[:, 1]).sum(axis=0)
    else:
        K = current - nxt
        l = H[:, 1].sum(axis=0)
    return RestrictionSystem(
        K,
        l,
        rows,
        tuple(f"censor:{c}" for c in cols),
        ("censoring",) * K.shape[1],
        {
            "family": "censoring",
            "probe_formula": formula,
            "target": target,
            "stabilized": stabilizer is not None,
        },
    )


def censoring_eq16_residual(
    data: LongitudinalDataset,
    w: np.ndarray,
    formula: str,
    target: str = "repeated",
    stabilizer: Optional[CensoringModel] = None,
) -> np.ndarray:
    """Residual of the censoring restrictions in their visit-difference form.

    ``w`` is an ``(n, T + 1)`` weight array (visit 0 ignored and taken as 1);
    evaluates ``sum_j c_j sum_i [R_ij w_ij - R_{i,j-1} w_{i,j-1} pis_ij] H_{i,j-1}``
    with ``c_j = T - j + 1`` (repeated) or 1 (eventual).
    """
    T = data.T
    H, _, _ = _dense_design(data, formula, "r", (1, T))
    pis = np.ones((data.n, T + 1))
    if stabilizer is not None:
        pis = np.nan_to_num(stabilizer.probabilities(data), nan=0.0)
    R = data.r
    W = np.where(R == 1, np.nan_to_num(w), 0.0).astype(float)
    W[:, 0] = 1.0
    total = np.zeros(H.shape[2])
    for jj in range(1, T + 1):
        c = (T - jj + 1) if target == "repeated" else 1
        diff = R[:, jj] * W[:, jj] - R[:, jj - 1] * W[:, jj - 1] * pis[:, jj]
        total += c * (diff[:, None] * H[:, jj]).sum(axis=0)
    return total


def assemble_joint(
    systems: Sequence[RestrictionSystem], drop_normalization_if_censoring: bool = True
) -> RestrictionSystem:
    """Concatenate systems column-wise, then prune zero and dependent columns.

    Normalization columns are dropped when censoring columns are present
    (and the flag is set). Dependence is detected greedily in column order on
    unit-normalized columns, so earlier columns survive over later copies.
    """
    if not systems:
        raise DataError("no restriction systems to assemble")
    rows = systems[0].rows
    for s in systems[1:]:
        if not s.rows.same_as(rows):
            raise DataError("restriction systems do not share the same calibrated rows")
    K = np.hstack([s.K for s in systems])
    l = np.concatenate([s.l for s in systems])
    labels = [lab for s in systems for lab in s.labels]
    family = [f for s in systems for f in s.family]
    report: List[Tuple[str, str]] = [p for s in systems for p in s.pruned]

    keep = np.ones(len(labels), dtype=bool)
    if drop_normalization_if_censoring and "censoring" in family:
        for q, f in enumerate(family):
            if f == "normalization":
                keep[q] = False
                report.append((labels[q], "normalization dropped: censoring restrictions fix visit totals"))

    basis: List[np.ndarray] = []
    for q in range(len(labels)):
        if not keep[q]:
            continue
        col = K[:, q]
        scale = np.max(np.abs(col)) if col.size else 0.0
        if scale < ZERO_COLUMN_TOL:
            keep[q] = False
            report.append((labels[q], "zero column"))
            continue
        v = col / np.linalg.norm(col)
        for _ in range(2):
            for b in basis:
                v = v - (b @ v) * b
        resid = np.linalg.norm(v)
        if resid <= DEPENDENCE_RTOL:
            keep[q] = False
            report.append((labels[q], "linearly dependent on earlier columns"))
            continue
        basis.append(v / resid)

    probe = {"components": [dict(s.probe_spec) for s in systems]}
    return RestrictionSystem(
        K[:, keep],
        l[keep],
        rows,
        tuple(np.array(labels, dtype=object)[keep]),
        tuple(np.array(family, dtype=object)[keep]),
        probe,
        tuple(report),
    )


def write_diagnostics(
    system: RestrictionSystem,
    path: Union[str, PathLike],
    w0: np.ndarray,
    w_star: Optional[np.ndarray] = None,
) -> None:
    """CSV of ``label,l,residual_initial,residual_calibrated`` per restriction."""
    r0 = system.residual(w0)
    r1 = system.residual(w_star) if w_star is not None else np.full(r0.shape, np.nan)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["label", "l", "residual_initial", "residual_calibrated"])
        for lab, lv, a, b in zip(system.labels, system.l, r0, r1):
            out.writerow([lab, repr(float(lv)), repr(float(a)), "" if np.isnan(b) else repr(float(b))])
