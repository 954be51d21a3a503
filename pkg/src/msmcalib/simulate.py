"""Simulation harness: the ordinal-treatment data generator with optional
covariate-dependent dropout, covariate transforms for misspecified models,
and a replication study summarizing bias, SD and RMSE."""

from __future__ import annotations

import csv
import io
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from os import PathLike
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .dataset import LongitudinalDataset, from_frame
from .errors import DataError, MsmCalibError
from .msm import MsmSpec, fit_msm
from .pipeline import PipelineConfig, add_derived, calibrate_weights, initial_weights
from .rng import replicate_rng
from .weights import WeightMatrix, fit_treatment_model

CENSORING = ("none", "covariate_dependent")
COVARIATES = ("correct", "transformed")
ESTIMATORS = ("mle", "cmle", "true")
TRUE_GAMMA = {"cum_art": 10.0, "cum_haart": 20.0}
LOG_ZERO_SUBSTITUTE = np.log(1e-300) + 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation design. ``noise_sd`` is the outcome error standard deviation."""

    n: int = 500
    T: int = 10
    censoring: str = "none"
    covariates: str = "correct"
    seed: int = 0
    replicates: int = 300
    noise_sd: float = 20.0

    def __post_init__(self):
        if self.n < 2:
            raise DataError("n must be at least 2")
        if self.T < 1:
            raise DataError("T must be at least 1")
        if self.censoring not in CENSORING:
            raise DataError(f"censoring must be one of {CENSORING}")
        if self.covariates not in COVARIATES:
            raise DataError(f"covariates must be one of {COVARIATES}")
        if self.replicates < 0 or self.noise_sd < 0:
            raise DataError("replicates and noise_sd must be nonnegative")

    @classmethod
    def scenario(cls, number: int, **kw) -> "ScenarioConfig":
        if number not in (1, 2):
            raise DataError("scenario must be 1 or 2")
        return cls(censoring="none" if number == 1 else "covariate_dependent", **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SimulatedCohort:
    data: LongitudinalDataset
    treatment_prob: np.ndarray
    observe_prob: np.ndarray


def generate_cohort_with_truth(config: ScenarioConfig, replicate: int = 0) -> SimulatedCohort:
    """Draw one cohort and keep the generating probabilities.

    ``treatment_prob[:, j]`` is p_j (shared by both treatment indicators);
    ``observe_prob[:, j]`` is q_j. Both are NaN at visit 0.
    """
    rng = replicate_rng(config.seed, replicate)
    n, T = config.n, config.T
    shape = (n, T + 1)
    a0, a1 = np.zeros(shape), np.zeros(shape)
    x = np.zeros((4,) + shape)
    y, r = np.zeros(shape), np.zeros(shape)
    p = np.full(shape, np.nan)
    q = np.full(shape, np.nan)
    cum = np.zeros(n)

    def covariates(j):
        s = a0[:, j] + a1[:, j]
        z = rng.standard_normal((4, n))
        u = 1.0 - 0.3 * s
        x[0, :, j] = u * z[0]
        x[1, :, j] = u * z[1]
        x[2, :, j] = z[2] + 0.5 * cum
        x[3, :, j] = z[3] + 0.5 * cum

    def outcome(j):
        xs = x[:, :, max(j - 1, 0) : j + 1].sum(axis=(0, 2))
        y[:, j] = 200.0 + 5.0 * (a0[:, j] + a1[:, j] + xs) + config.noise_sd * rng.standard_normal(n)

    r[:, 0] = 1.0
    a0[:, 0] = rng.random(n) < 0.5
    a1[:, 0] = (a0[:, 0] == 1) & (rng.random(n) < 0.5)
    cum += a0[:, 0] + a1[:, 0]
    covariates(0)
    outcome(0)
    for j in range(1, T + 1):
        prev = x[:, :, j - 1]
        lin = a0[:, j - 1] + a1[:, j - 1] + 0.5 * prev[0] + 0.5 * prev[1]
        if config.censoring == "covariate_dependent":
            q[:, j] = expit(1.0 + lin + 0.2 * prev[2] + 0.2 * prev[3])
        else:
            q[:, j] = 1.0
        r[:, j] = r[:, j - 1] * (rng.random(n) < q[:, j])
        p[:, j] = expit(lin - 0.2 * prev[2] - 0.2 * prev[3])
        a0[:, j] = rng.random(n) < p[:, j]
        a1[:, j] = (a0[:, j] == 1) & (rng.random(n) < p[:, j])
        cum += a0[:, j] + a1[:, j]
        covariates(j)
        outcome(j)

    ids = [f"s{i + 1}" for i in range(n)]
    cols = {"r": r, "y": y, "a0": a0, "a1": a1}
    cols.update({f"x{k + 1}": x[k] for k in range(4)})
    data = from_frame(ids, "ordinal3", cols)
    if config.covariates == "transformed":
        data = misspecify_transform(data)
    return SimulatedCohort(data, np.where(r == 1, p, np.nan), np.where(r == 1, q, np.nan))


def generate_cohort(config: ScenarioConfig, replicate: int = 0) -> LongitudinalDataset:
    return generate_cohort_with_truth(config, replicate).data


def misspecify_transform(data: LongitudinalDataset) -> LongitudinalDataset:
    """Append x1t = x1^3/9, x2t = x1 x2, x3t = log|x3| + 4 and x4t = expit(x4).

    An exact zero in x3 maps to log(1e-300) + 4; the number of such entries
    is reported through a `RuntimeWarning`.
    """
    for c in ("x1", "x2", "x3", "x4"):
        if c not in data:
            raise DataError(f"transform needs column {c!r}")
    x1, x2, x3, x4 = (data[c] for c in ("x1", "x2", "x3", "x4"))
    zeros = x3 == 0
    if zeros.any():
        warnings.warn(f"x3 exactly zero in {int(zeros.sum())} entries", RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore"):
        x3t = np.where(zeros, LOG_ZERO_SUBSTITUTE, np.log(np.abs(x3)) + 4.0)
    return data.with_columns(x1t=x1**3 / 9.0, x2t=x1 * x2, x3t=x3t, x4t=expit(x4))


def study_pipeline(config: ScenarioConfig) -> PipelineConfig:
    """Weight-model and MSM specification used for every replicate."""
    xs = ("x1t", "x2t", "x3t", "x4t") if config.covariates == "transformed" else ("x1", "x2", "x3", "x4")
    hist = "1 + a0@1 + a1@1"
    full = hist + "".join(f" + {c}@1" for c in xs)
    cens = None
    if config.censoring == "covariate_dependent":
        cens = "visit + a0@1 + a1@1" + "".join(f" + {c}@1" for c in xs)
    return PipelineConfig(
        numerator={"a0": hist, "a1": hist},
        denominator={"a0": full, "a1": full},
        censoring=cens,
        msm_formula="1 + cum_art + cum_haart",
        derived={"cum_art": "a0-a1", "cum_haart": "a1"},
        treatment_terms=("cum_art", "cum_haart"),
        normalization="per_visit",
        target="repeated",
    )


def true_weights(cohort: SimulatedCohort, cfg: PipelineConfig) -> WeightMatrix:
    """Stabilized weights with the generating denominator and fitted numerator."""
    data = cohort.data
    num = fit_treatment_model(data, cfg.numerator)
    lik_num, _ = num.likelihood(data)
    p = cohort.treatment_prob
    a0, a1 = data["a0"], data["a1"]
    lik_den = np.where(a0 == 1, p * np.where(a1 == 1, p, 1.0 - p), 1.0 - p)
    factors = lik_num / lik_den
    if cfg.censoring is not None:
        factors = factors / cohort.observe_prob
    mask = np.zeros(data.r.shape, dtype=bool)
    mask[:, 1:] = data.r[:, 1:] == 1
    factors = np.where(mask, factors, 1.0)
    factors[:, 0] = 1.0
    values = np.where(mask, np.cumprod(factors, axis=1), np.nan)
    values[:, 0] = 1.0
    return WeightMatrix(data.ids, values, mask, np.where(mask, factors, np.nan), "joint", {"source": "generative"})


@dataclass(frozen=True)
class ReplicateOutcome:
    replicate: int
    estimates: Dict[str, Tuple[float, ...]]
    lambda_inf: float
    failure: Optional[str] = None


def run_replicate(config: ScenarioConfig, replicate: int, estimators: Sequence[str] = ("mle", "cmle")) -> ReplicateOutcome:
    cfg = study_pipeline(config)
    terms = cfg.treatment_terms
    try:
        cohort = generate_cohort_with_truth(config, replicate)
        data = add_derived(cohort.data, cfg.derived)
        spec = MsmSpec(cfg.msm_formula, terms)
        out: Dict[str, Tuple[float, ...]] = {}
        lam_inf = float("nan")
        if "mle" in estimators or "cmle" in estimators:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                w0, num, stab = initial_weights(data, cfg)
            if "mle" in estimators:
                est = fit_msm(data, spec, w0)
                out["mle"] = tuple(est[t] for t in terms)
            if "cmle" in estimators:
                w1, _, sol = calibrate_weights(data, cfg, w0, num, stab)
                est = fit_msm(data, spec, w1)
                out["cmle"] = tuple(est[t] for t in terms)
                lam_inf = float(np.max(np.abs(sol.lam))) if sol.lam.size else 0.0
        if "true" in estimators:
            est = fit_msm(data, spec, true_weights(replace(cohort, data=data), cfg))
            out["true"] = tuple(est[t] for t in terms)
    except (MsmCalibError, np.linalg.LinAlgError) as exc:
        return ReplicateOutcome(replicate, {}, float("nan"), f"{type(exc).__name__}: {exc}")
    return ReplicateOutcome(replicate, out, lam_inf)


def _run_replicate_args(args):
    return run_replicate(*args)


@dataclass(frozen=True, eq=False)
class StudySummary:
    config: ScenarioConfig
    estimators: Tuple[str, ...]
    coefficients: Tuple[str, ...]
    truth: Tuple[float, ...]
    bias: Dict[str, np.ndarray]
    sd: Dict[str, np.ndarray]
    rmse: Dict[str, np.ndarray]
    replicates_used: int
    failures: Tuple[Tuple[int, str], ...]
    lambda_inf: np.ndarray
    estimates: Dict[str, np.ndarray]

    def rows(self) -> List[dict]:
        out = []
        for e in self.estimators:
            for q, c in enumerate(self.coefficients):
                out.append(
                    {
                        "estimator": e,
                        "coefficient": c,
                        "truth": self.truth[q],
                        "bias": float(self.bias[e][q]),
                        "sd": float(self.sd[e][q]),
                        "rmse": float(self.rmse[e][q]),
                        "replicates": self.replicates_used,
                    }
                )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["estimator", "coefficient", "truth", "bias", "sd", "rmse", "replicates"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def write_csv(self, path: Union[str, PathLike]) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def format_table(self) -> str:
        """Text table with (gamma1, gamma2) pairs under Bias, SD and RMSE."""
        c = self.config
        head = (
            f"n={c.n}  T={c.T}  censoring={c.censoring}  covariates={c.covariates}  "
            f"replicates={self.replicates_used}/{c.replicates}  noise_sd={c.noise_sd:g}"
        )
        lines = [head, f"{'':6}{'Bias':>16}{'SD':>16}{'RMSE':>16}"]
        for e in self.estimators:
            cells = [
                "  ".join(f"{v:6.2f}" for v in stat[e]) for stat in (self.bias, self.sd, self.rmse)
            ]
            lines.append(f"{e.upper():6}" + "".join(f"{cell:>16}" for cell in cells))
        if self.failures:
            lines.append(f"failed replicates: {len(self.failures)}")
        return "\n".join(lines)


def run_study(
    config: ScenarioConfig,
    estimators: Sequence[str] = ("mle", "cmle"),
    *,
    jobs: int = 1,
) -> StudySummary:
    """Replicate the study and aggregate per estimator and coefficient.

    bias = mean error, SD = sample standard deviation over successful
    replicates, RMSE = sqrt(bias^2 + SD^2). A replicate failing for any
    estimator is dropped for all of them.
    """
    if config.replicates < 2:
        raise DataError("a study needs at least 2 replicates")
    bad = set(estimators) - set(ESTIMATORS)
    if bad:
        raise DataError(f"unknown estimators {sorted(bad)}")
    estimators = tuple(estimators)
    tasks = [(config, k, estimators) for k in range(config.replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_replicate_args, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        outcomes = [run_replicate(*t) for t in tasks]
    outcomes.sort(key=lambda o: o.replicate)
    good = [o for o in outcomes if o.failure is None]
    failures = tuple((o.replicate, o.failure) for o in outcomes if o.failure is not None)
    if len(good) < 2:
        raise DataError(f"only {len(good)} replicates succeeded; first failure: {failures[0][1] if failures else ''}")
    coefs = study_pipeline(config).treatment_terms
    truth = np.array([TRUE_GAMMA[c] for c in coefs])
    bias, sd, rmse, est = {}, {}, {}, {}
    for e in estimators:
        vals = np.array([o.estimates[e] for o in good])
        err = vals - truth
        bias[e] = err.mean(axis=0)
        sd[e] = err.std(axis=0, ddof=1)
        rmse[e] = np.sqrt(bias[e] ** 2 + sd[e] ** 2)
        est[e] = vals
    lam = np.array([o.lambda_inf for o in good])
    return StudySummary(config, estimators, coefs, tuple(map(float, truth)), bias, sd, rmse, len(good), failures, lam, est)
