"""Weighted estimating equations for linear marginal structural models,
with subject-level bootstrap standard errors."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import LongitudinalDataset
from .design import DesignSpec, build_design
from .errors import BootstrapFailureError, DataError, MsmCalibError, RankDeficiencyError
from .glm import check_rank
from .rng import replicate_rng
from .weights import WeightMatrix


@dataclass(frozen=True)
class MsmSpec:
    """Outcome design for the MSM; ``treatment_terms`` name the causal columns."""

    formula: str
    treatment_terms: Tuple[str, ...] = ()
    visits: Optional[Tuple[int, int]] = None


@dataclass(frozen=True, eq=False)
class MsmEstimate:
    names: Tuple[str, ...]
    coefficients: np.ndarray
    bootstrap_se: Optional[np.ndarray] = None
    replicates_used: int = 0
    failed_replicates: int = 0
    n_rows: int = 0
    total_weight: float = 0.0
    extra: Dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def to_dict(self) -> dict:
        se = self.bootstrap_se
        return {
            "coefficients": dict(zip(self.names, map(float, self.coefficients))),
            "bootstrap_se": None if se is None else dict(zip(self.names, map(float, se))),
            "replicates_used": self.replicates_used,
            "failed_replicates": self.failed_replicates,
            "n_rows": self.n_rows,
            "total_weight": self.total_weight,
            **self.extra,
        }

    def write_csv(self, path: Union[str, PathLike]) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["coefficient", "estimate", "se"])
            for q, name in enumerate(self.names):
                se = "" if self.bootstrap_se is None else repr(float(self.bootstrap_se[q]))
                out.writerow([name, repr(float(self.coefficients[q])), se])

    def write_json(self, path: Union[str, PathLike]) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def fit_msm(
    data: LongitudinalDataset,
    spec: MsmSpec,
    weights: Optional[WeightMatrix] = None,
) -> MsmEstimate:
    """Weighted least squares over observed (subject, visit) rows.

    With an identity link and working independence the estimating equations
    reduce to ``sum w_ij x_ij (y_ij - x_ij^T b) = 0``. ``weights=None`` is
    the unweighted fit.
    """
    visits = spec.visits or (1, data.T)
    X = build_design(data, DesignSpec(spec.formula, "y"), visits)
    for term in spec.treatment_terms:
        if term not in X.columns:
            raise DataError(f"treatment term {term!r} is not a column of the MSM design")
    if weights is None:
        w = np.ones(X.n_rows)
    else:
        if weights.values.shape != (data.n, data.T + 1):
            raise DataError("weight matrix does not match the dataset shape")
        if not np.all(weights.mask[X.subjects, X.visits]):
            raise DataError("weights undefined for some observed rows of the MSM")
        w = weights.values[X.subjects, X.visits]
    total = float(w.sum())
    if total <= 0:
        raise DataError("zero total weight")
    sw = np.sqrt(w)
    Xw = X.values * sw[:, None]
    check_rank(Xw, X.columns)
    beta = np.linalg.lstsq(Xw, X.response * sw, rcond=None)[0]
    beta.setflags(write=False)
    return MsmEstimate(X.columns, beta, n_rows=X.n_rows, total_weight=total)


def weighted_residual_score(data, spec: MsmSpec, weights: Optional[WeightMatrix], beta) -> np.ndarray:
    """``sum w x (y - x^T b)`` per column, for checking a fit."""
    X = build_design(data, DesignSpec(spec.formula, "y"), spec.visits or (1, data.T))
    w = np.ones(X.n_rows) if weights is None else weights.values[X.subjects, X.visits]
    return X.values.T @ (w * (X.response - X.values @ beta))


def _one_replicate(args):
    data, pipeline, seed, b = args
    rng = replicate_rng(seed, b)
    idx = rng.integers(0, data.n, size=data.n)
    try:
        est = pipeline(data.take(idx))
    except (MsmCalibError, np.linalg.LinAlgError) as exc:
        return b, None, f"{type(exc).__name__}: {exc}"
    return b, np.asarray(est, dtype=np.float64), None


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    se: np.ndarray
    estimates: np.ndarray
    replicates_used: int
    failed_replicates: int
    failures: Tuple[Tuple[int, str], ...]

    @property
    def failure_rate(self) -> float:
        total = self.replicates_used + self.failed_replicates
        return self.failed_replicates / total if total else 0.0


def bootstrap(
    data: LongitudinalDataset,
    pipeline: Callable[[LongitudinalDataset], Sequence[float]],
    B: int,
    seed: int,
    *,
    jobs: int = 1,
    max_failure_rate: float = 0.2,
) -> BootstrapResult:
    """Nonparametric bootstrap resampling whole subject trajectories.

    ``pipeline`` reruns the full estimation on a resampled dataset and
    returns the coefficient vector. Replicate ``b`` draws from its own
    stream derived from ``(seed, b)``, so results do not depend on ``jobs``.
    Failed replicates are excluded and counted.
    """
    if B < 2:
        raise DataError("bootstrap needs at least 2 replicates")
    tasks = [(data, pipeline, seed, b) for b in range(B)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_replicate, tasks, chunksize=max(1, B // (4 * jobs))))
    else:
        results = [_one_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    good = [est for _, est, err in results if err is None]
    failures = tuple((b, err) for b, _, err in results if err is not None)
    rate = len(failures) / B
    if rate > max_failure_rate:
        raise BootstrapFailureError(
            f"{len(failures)} of {B} bootstrap replicates failed ({rate:.0%}); first: {failures[0][1]}"
        )
    if len(good) < 2:
        raise BootstrapFailureError("fewer than 2 successful bootstrap replicates")
    est = np.vstack(good)
    return BootstrapResult(est.std(axis=0, ddof=1), est, len(good), len(failures), failures)
