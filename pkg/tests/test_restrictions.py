import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from msmcalib import calibrate as cal
from msmcalib.dataset import from_frame
from msmcalib.errors import DataError, DegenerateVarianceError
from msmcalib.glm import fit_logistic
from msmcalib.pipeline import add_derived, build_system, initial_weights
from msmcalib.restrictions import (
    RestrictionSystem,
    RowIndex,
    assemble_joint,
    censoring_eq16_residual,
    censoring_restrictions,
    continuous_treatment_restrictions,
    normalization_restrictions,
    ordinal_treatment_restrictions,
    write_diagnostics,
)
from msmcalib.simulate import ScenarioConfig, generate_cohort_with_truth, study_pipeline, true_weights
from msmcalib.weights import fit_censoring_model, fit_treatment_model

from conftest import random_cohort


class FixedNumerator:
    """Stand-in numerator with prescribed fitted values."""

    def __init__(self, kind, visits, **pred):
        self.kind = kind
        self.visits = visits
        self._pred = pred

    def predictions(self, data):
        return self._pred


def dense_w(rows, w):
    out = np.full(rows.shape_nt, np.nan)
    out[rows.subjects, rows.visits] = w
    return out


# --- treatment families -------------------------------------------------------


def test_two_subject_binary_toy():
    d = from_frame(["a", "b"], "binary", {"r": np.ones((2, 2)), "y": np.zeros((2, 2)), "a0": [[0, 1], [0, 0]]})
    rows = RowIndex.from_data(d)
    num = fit_treatment_model(d, {"a0": "1"})
    s = ordinal_treatment_restrictions(d, rows, num, {"a0": "1"})
    np.testing.assert_allclose(s.K[:, 0], [0.5, -0.5], atol=1e-12)
    np.testing.assert_array_equal(s.l, [0.0])
    assert s.labels == ("treat[a0]:(Intercept)",)


def test_ordinal_matches_brute_force_sums():
    d = random_cohort(5, n=3, T=2, censor=False)
    rng = np.random.default_rng(5)
    e0, e1 = rng.uniform(0.2, 0.8, (3, 3)), rng.uniform(0.2, 0.8, (3, 3))
    num = FixedNumerator("ordinal3", (1, 2), a0=e0, a1=e1)
    rows = RowIndex.from_data(d)
    s = ordinal_treatment_restrictions(d, rows, num, {"a0": "1 + x1@1", "a1": "1 + x2@1"})
    a0, a1, x1, x2 = d["a0"], d["a1"], d["x1"], d["x2"]
    expected = []
    for i, j in zip(rows.subjects, rows.visits):
        row = np.zeros(4)
        for k in range(1, j + 1):
            r0 = a0[i, k] - e0[i, k]
            r1 = a0[i, k] * (a1[i, k] - e1[i, k])
            row += [r0, r0 * x1[i, k - 1], r1, r1 * x2[i, k - 1]]
        expected.append(row)
    np.testing.assert_allclose(s.K, np.array(expected), rtol=0, atol=1e-14)
    assert s.labels == ("treat[a0]:(Intercept)", "treat[a0]:x1@1", "treat[a1]:(Intercept)", "treat[a1]:x2@1")


def test_deterministic_treatment_gives_zero_columns():
    # treatment copies its own history, so a saturated history model fits exactly
    n, T = 6, 2
    a = np.zeros((n, T + 1))
    a[:3] = 1.0
    d = from_frame([str(i) for i in range(n)], "binary", {"r": np.ones((n, T + 1)), "y": a, "a0": a, "x": np.arange(n * 3.0).reshape(n, 3)})
    e0 = a.copy()
    num = FixedNumerator("binary", (1, T), a0=e0)
    rows = RowIndex.from_data(d)
    s = ordinal_treatment_restrictions(d, rows, num, {"a0": "1 + x@1"})
    assert np.all(s.K == 0)
    joint = assemble_joint([s, normalization_restrictions(rows)])
    assert joint.family == ("normalization", "normalization")
    assert {lab for lab, _ in joint.pruned} == {"treat[a0]:(Intercept)", "treat[a0]:x@1"}


@pytest.mark.parametrize("seed", range(5))
def test_score_inversion_matches_probe_score(seed):
    d = random_cohort(100 + seed, n=30, T=3)
    rows = RowIndex.from_data(d)
    num = fit_treatment_model(d, {"a0": "1 + a0@1", "a1": "1 + a1@1"})
    probe = {"a0": "1 + a0@1 + x1@1 + x2@1", "a1": "1 + a1@1 + x2@1"}
    s = ordinal_treatment_restrictions(d, rows, num, probe)
    w = np.random.default_rng(seed).uniform(0.5, 2.0, len(rows))
    a0, a1, x1, x2 = d["a0"], d["a1"], d["x1"], d["x2"]

    def loglik(beta0, beta1):
        total = 0.0
        for i, j, wij in zip(rows.subjects, rows.visits, w):
            for k in range(1, j + 1):
                p0 = expit(beta0 @ [1, a0[i, k - 1], x1[i, k - 1], x2[i, k - 1]])
                total += wij * (np.log(p0) if a0[i, k] == 1 else np.log1p(-p0))
                if a0[i, k] == 1:
                    p1 = expit(beta1 @ [1, a1[i, k - 1], x2[i, k - 1]])
                    total += wij * (np.log(p1) if a1[i, k] == 1 else np.log1p(-p1))
        return total

    b0 = np.r_[num.fits["a0"].coefficients, 0.0, 0.0]
    b1 = np.r_[num.fits["a1"].coefficients, 0.0]
    h = 1e-6
    grad = []
    for q in range(4):
        e = np.zeros(4)
        e[q] = h
        grad.append((loglik(b0 + e, b1) - loglik(b0 - e, b1)) / (2 * h))
    for q in range(3):
        e = np.zeros(3)
        e[q] = h
        grad.append((loglik(b0, b1 + e) - loglik(b0, b1 - e)) / (2 * h))
    np.testing.assert_allclose(s.residual(w), grad, rtol=1e-6, atol=1e-6)


def test_continuous_single_row_columns():
    d = from_frame(["s"], "continuous", {"r": np.ones((1, 2)), "y": np.zeros((1, 2)), "a": [[0.0, 2.0]]})
    num = FixedNumerator("continuous", (1, 1), mean=np.array([[np.nan, 0.0]]), var=np.array([[np.nan, 1.0]]))
    s = continuous_treatment_restrictions(d, RowIndex.from_data(d), num, {"mean": "1", "logvar": "1"})
    np.testing.assert_allclose(s.K, [[2.0, 3.0]])
    assert s.labels == ("treat[mean]:(Intercept)", "treat[logvar]:(Intercept)")


def test_continuous_exact_mean_fit():
    d = random_cohort(8, n=5, T=2, censor=False, kind="continuous")
    mean = np.array(d["a"], copy=True)
    num = FixedNumerator("continuous", (1, 2), mean=mean, var=np.full(mean.shape, 2.0))
    rows = RowIndex.from_data(d)
    s = continuous_treatment_restrictions(d, rows, num, {"mean": "1 + x1@1", "logvar": "1"})
    np.testing.assert_allclose(s.K[:, :2], 0.0, atol=1e-15)
    np.testing.assert_allclose(s.K[:, 2], -rows.visits.astype(float))


def test_continuous_four_row_brute_force():
    d = random_cohort(9, n=2, T=2, censor=False, kind="continuous")
    rng = np.random.default_rng(9)
    mean, var = rng.normal(size=(2, 3)), rng.uniform(0.5, 2, (2, 3))
    num = FixedNumerator("continuous", (1, 2), mean=mean, var=var)
    rows = RowIndex.from_data(d)
    s = continuous_treatment_restrictions(d, rows, num, {"mean": "1 + x1@1", "logvar": "x2@1"})
    a, x1, x2 = d["a"], d["x1"], d["x2"]
    expected = []
    for i, j in zip(rows.subjects, rows.visits):
        row = np.zeros(3)
        for k in range(1, j + 1):
            z = (a[i, k] - mean[i, k]) / var[i, k]
            zs = -1 + (a[i, k] - mean[i, k]) ** 2 / var[i, k]
            row += [z, z * x1[i, k - 1], zs * x2[i, k - 1]]
        expected.append(row)
    assert len(expected) == 4
    np.testing.assert_allclose(s.K, expected, atol=1e-14)


def test_continuous_degenerate_variance():
    d = random_cohort(9, n=2, T=1, censor=False, kind="continuous")
    num = FixedNumerator("continuous", (1, 1), mean=np.zeros((2, 2)), var=np.full((2, 2), 1e-13))
    with pytest.raises(DegenerateVarianceError):
        continuous_treatment_restrictions(d, RowIndex.from_data(d), num, {"mean": "1", "logvar": "1"})


def test_eventual_treatment_keeps_final_visit_only():
    d = random_cohort(10, n=20, T=3, censor=False)
    rows = RowIndex.from_data(d)
    num = fit_treatment_model(d, {"a0": "1", "a1": "1"})
    rep = ordinal_treatment_restrictions(d, rows, num, {"a0": "1 + x1@1", "a1": "1"}, "repeated")
    ev = ordinal_treatment_restrictions(d, rows, num, {"a0": "1 + x1@1", "a1": "1"}, "eventual")
    last = rows.visits == 3
    np.testing.assert_array_equal(ev.K[last], rep.K[last])
    assert np.all(ev.K[~last] == 0)


# --- normalization ------------------------------------------------------------


def test_normalization_counts():
    rows = RowIndex(np.array([0, 0, 1, 1, 2]), np.array([1, 2, 1, 2, 1]), (3, 3))
    s = normalization_restrictions(rows)
    np.testing.assert_array_equal(s.l, [3, 2])
    np.testing.assert_array_equal(s.K, [[1, 0], [0, 1], [1, 0], [0, 1], [1, 0]])
    single = normalization_restrictions(rows, per_visit=False)
    np.testing.assert_array_equal(single.K, np.ones((5, 1)))
    np.testing.assert_array_equal(single.l, [5])


def test_normalization_solved_means_are_one():
    d = random_cohort(11, n=60, T=3)
    rows = RowIndex.from_data(d)
    w0 = np.random.default_rng(11).uniform(0.3, 3.0, len(rows))
    s = normalization_restrictions(rows)
    sol = cal.solve(w0, s)
    w = cal.tilt(w0, s.K, sol.lam)
    for v in (1, 2, 3):
        assert w[rows.visits == v].mean() == pytest.approx(1.0, abs=1e-8)


# --- censoring ----------------------------------------------------------------


def test_telescoping_without_censoring():
    d = random_cohort(12, n=15, T=4, censor=False)
    rows = RowIndex.from_data(d)
    s = censoring_restrictions(d, rows, "1")
    np.testing.assert_allclose(s.K.T @ np.ones(len(rows)), [15 * 4])
    np.testing.assert_allclose(s.l, [60])


def test_single_visit_reduces_to_sample_size_form():
    d = random_cohort(13, n=40, T=1)
    rows = RowIndex.from_data(d)
    s = censoring_restrictions(d, rows, "1 + x1@1 + x2@1")
    x1, x2 = d["x1"][:, 0], d["x2"][:, 0]
    H0 = np.column_stack([np.ones(40), x1, x2])
    np.testing.assert_allclose(s.K, H0[rows.subjects], atol=1e-15)
    np.testing.assert_allclose(s.l, H0.sum(axis=0), rtol=1e-14)


def direct_visit_difference(d, W, formula_cols, T, target, pis=None):
    """Independent loop over subjects for the visit-difference residual."""
    R = d.r
    total = np.zeros(len(formula_cols))
    for i in range(d.n):
        for j in range(1, T + 1):
            c = (T - j + 1) if target == "repeated" else 1
            H = np.array([f(i, j - 1) for f in formula_cols])
            prev = 1.0 if j == 1 else (W[i, j - 1] if R[i, j - 1] == 1 else 0.0)
            cur = W[i, j] if R[i, j] == 1 else 0.0
            stab = 1.0 if pis is None else (pis[i, j] if R[i, j - 1] == 1 else 0.0)
            if R[i, j - 1] == 1:
                total += c * (cur - prev * stab) * H
    return total


@pytest.mark.parametrize("target", ["repeated", "eventual"])
def test_visit_difference_equals_solved_form(target):
    worst = 0.0
    for seed in range(20):
        d = random_cohort(200 + seed, n=25, T=3)
        rows = RowIndex.from_data(d)
        s = censoring_restrictions(d, rows, "1 + x1@1 + a0@1", target)
        w = np.random.default_rng(seed).uniform(0.2, 5.0, len(rows))
        W = dense_w(rows, w)
        x1, a0 = d["x1"], d["a0"]
        cols = [lambda i, k: 1.0, lambda i, k: x1[i, k], lambda i, k: a0[i, k]]
        direct = direct_visit_difference(d, W, cols, 3, target)
        np.testing.assert_allclose(s.residual(w), direct, rtol=0, atol=1e-10 * max(1, np.abs(s.l).max()))
        np.testing.assert_allclose(
            censoring_eq16_residual(d, W, "1 + x1@1 + a0@1", target), direct, rtol=0, atol=1e-10 * max(1, np.abs(s.l).max())
        )
        worst = max(worst, np.max(np.abs(s.residual(w) - direct)))
    assert worst <= 1e-10 * 1e3


def test_visit_difference_equals_solved_form_stabilized():
    for seed in range(20):
        d = random_cohort(300 + seed, n=40, T=3)
        rows = RowIndex.from_data(d)
        stab = fit_censoring_model(d, "1 + a0@1")
        s = censoring_restrictions(d, rows, "1 + x2@1", stabilizer=stab)
        w = np.random.default_rng(seed).uniform(0.2, 5.0, len(rows))
        W = dense_w(rows, w)
        x2 = d["x2"]
        pis = np.nan_to_num(stab.probabilities(d), nan=0.0)
        direct = direct_visit_difference(d, W, [lambda i, k: 1.0, lambda i, k: x2[i, k]], 3, "repeated", pis)
        np.testing.assert_allclose(s.residual(w), direct, rtol=0, atol=1e-10 * max(1, np.abs(s.l).max()))


@given(seed=st.integers(0, 2**31 - 1), T=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_visit_difference_identity_property(seed, T):
    d = random_cohort(seed, n=12, T=T)
    rows = RowIndex.from_data(d)
    if len(rows) == 0:
        return
    s = censoring_restrictions(d, rows, "1 + x1@1")
    W = dense_w(rows, np.random.default_rng(seed).uniform(0.1, 10, len(rows)))
    lhs = s.residual(W[rows.subjects, rows.visits])
    rhs = censoring_eq16_residual(d, W, "1 + x1@1")
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10 * max(1, np.abs(s.l).max()))


def test_pseudo_population_zero_score():
    d = random_cohort(14, n=80, T=1)
    rows = RowIndex.from_data(d)
    s = censoring_restrictions(d, rows, "1 + x1@1 + x2@1")
    cens = fit_censoring_model(d, "1 + x1@1")
    w0 = 1.0 / cens.probabilities(d)[rows.subjects, 1]
    sol = cal.solve(w0, s, tol=1e-12)
    assert sol.converged
    w_star = cal.tilt(w0, s.K, sol.lam)
    # pseudo-population: complete cases weighted w* - 1, incomplete cases 1
    R = d.r[:, 1]
    weights = np.ones(d.n)
    weights[rows.subjects] = w_star - 1.0
    H = np.column_stack([np.ones(d.n), d["x1"][:, 0], d["x2"][:, 0]])
    score = H.T @ (weights * (R - 0.5))
    assert np.max(np.abs(score)) <= 1e-8 * max(1.0, np.abs(s.l).max())
    if np.all(weights > 0):
        fit = fit_logistic(H, R, weights)
        np.testing.assert_allclose(fit.coefficients, 0.0, atol=1e-8)


def test_censoring_rejects_unobserved_rows():
    d = random_cohort(15, n=20, T=2)
    full = RowIndex(*np.nonzero(np.ones((20, 3), bool)[:, 1:]), (20, 3))
    full = RowIndex(full.subjects, full.visits + 1, (20, 3))
    with pytest.raises(DataError):
        censoring_restrictions(d, full, "1")
    with pytest.raises(DataError):
        censoring_restrictions(d, RowIndex.from_data(d), "1", target="nope")


# --- assembly -----------------------------------------------------------------


def _toy_parts(seed=16):
    d = random_cohort(seed, n=40, T=3)
    rows = RowIndex.from_data(d)
    num = fit_treatment_model(d, {"a0": "1", "a1": "1"})
    treat = ordinal_treatment_restrictions(d, rows, num, {"a0": "1 + x1@1", "a1": "1 + x2@1"})
    return d, rows, treat


def test_assembly_drops_normalization_with_censoring():
    d, rows, treat = _toy_parts()
    norm = normalization_restrictions(rows)
    cens = censoring_restrictions(d, rows, "visit + x1@1")
    joint = assemble_joint([treat, norm, cens])
    assert "normalization" not in joint.family
    assert joint.r == treat.r + cens.r
    reasons = [why for lab, why in joint.pruned if lab.startswith("normalize")]
    assert len(reasons) == 3 and all("dropped" in r for r in reasons)
    kept = assemble_joint([treat, norm, cens], drop_normalization_if_censoring=False)
    assert "normalization" in kept.family


def test_assembly_prunes_duplicates_and_zero_columns():
    d, rows, treat = _toy_parts()
    twice = assemble_joint([treat, treat])
    assert twice.r == treat.r
    assert twice.labels == treat.labels
    assert all(why == "linearly dependent on earlier columns" for _, why in twice.pruned)
    zero = RestrictionSystem(np.zeros((len(rows), 1)), [0.0], rows, ("zero",), ("extra",))
    out = assemble_joint([treat, zero])
    assert ("zero", "zero column") in out.pruned
    np.testing.assert_array_equal(out.l, treat.l)


def test_assembly_rejects_mismatched_rows():
    d, rows, treat = _toy_parts()
    other = RowIndex.from_data(random_cohort(99, n=40, T=3))
    with pytest.raises(DataError):
        assemble_joint([treat, normalization_restrictions(other)])


@pytest.mark.parametrize("seed", [77, 78])
def test_true_weights_satisfy_scenario1_system_in_expectation(seed):
    # weights from the generating probabilities satisfy the restrictions up to
    # Monte Carlo error: each column's residual is a sum of independent
    # per-subject contributions with mean zero
    config = ScenarioConfig.scenario(1, n=4000, seed=seed)
    cfg = study_pipeline(config)
    cohort = generate_cohort_with_truth(config)
    data = add_derived(cohort.data, cfg.derived)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w0, num, _ = initial_weights(data, cfg)
    system = build_system(data, cfg, w0, num)
    wt = true_weights(cohort, cfg)
    w = wt.values[system.rows.subjects, system.rows.visits]
    per_subject = np.zeros((data.n, system.r))
    np.add.at(per_subject, system.rows.subjects, system.K * w[:, None])
    per_subject -= system.l / data.n
    z = per_subject.sum(axis=0) / (per_subject.std(axis=0, ddof=1) * np.sqrt(data.n))
    assert np.max(np.abs(z)) < 4.0
    assert np.max(np.abs(system.residual(wt))) / system.m < 0.15


def test_diagnostics_csv(tmp_path):
    d, rows, treat = _toy_parts()
    system = assemble_joint([treat, normalization_restrictions(rows)])
    w0 = np.random.default_rng(3).uniform(0.5, 2, len(rows))
    sol = cal.solve(w0, system)
    w1 = cal.tilt(w0, system.K, sol.lam)
    path = tmp_path / "restrictions.csv"
    write_diagnostics(system, path, w0, w1)
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert [g["label"] for g in got] == list(system.labels)
    np.testing.assert_allclose([float(g["residual_initial"]) for g in got], system.residual(w0))
    assert max(abs(float(g["residual_calibrated"])) for g in got) <= 1e-8 * max(1, np.abs(system.l).max())
    write_diagnostics(system, path, w0)
    with open(path) as fh:
        assert all(g["residual_calibrated"] == "" for g in csv.DictReader(fh))
