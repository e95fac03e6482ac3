"""Tests for the targeted risk-difference estimator.

Oracles: hand arithmetic for the clever covariate and Wald intervals, cell
means for saturated fits, a stratified g-computation plug-in, and a dense
grid scan over the fluctuation coefficient.
"""

import math

import numpy as np
import pytest
from scipy.special import expit, logit

from tlkit.dataset import AnalyticDataset
from tlkit.errors import (
    AlignmentError,
    ConvergenceError,
    DegenerateOutcomeError,
    EmptyCohortError,
    InputError,
)
from tlkit.tmle import (
    CleverCovariate,
    OutcomeFit,
    clever_covariate,
    estimate_ate,
    fit_initial_outcome,
    fluctuate,
    rd_from_counts,
    unadjusted_rd,
)


def make_dataset(a, y, W, names=None):
    n = len(a)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    names = tuple(names or (f"w{j}" for j in range(W.shape[1])))
    return AnalyticDataset.from_arrays(
        [f"s{i:04d}" for i in range(n)], a, y, np.ones(n, dtype=int), W, names)


def cell_mean_fit(a, y, w):
    """Saturated outcome fit: empirical mean of Y within each (a, w) cell."""
    a, y, w = (np.asarray(v, dtype=float) for v in (a, y, w))
    q = {(av, wv): y[(a == av) & (w == wv)].mean() for av in (0, 1) for wv in (0, 1)}
    q1 = np.array([q[(1, wv)] for wv in w])
    q0 = np.array([q[(0, wv)] for wv in w])
    return OutcomeFit(q_obs=np.where(a == 1, q1, q0), q1=q1, q0=q0)


class TestCleverCovariate:
    def test_hand_arithmetic(self):
        h = clever_covariate(np.array([1, 0, 1]), np.array([0.5, 0.5, 0.01]))
        assert h.h_obs[0] == 2.0
        assert h.h_obs[1] == -2.0
        assert h.h_obs[2] == 100.0

    def test_bound_from_truncation(self):
        rng = np.random.default_rng(0)
        g = np.clip(rng.random(200), 0.01, 0.99)
        a = rng.integers(0, 2, 200)
        h = clever_covariate(a, g)
        assert np.max(np.abs(h.h_obs)) <= 1.0 / 0.01 + 1e-12

    def test_g_on_boundary_rejected(self):
        with pytest.raises(InputError):
            clever_covariate(np.array([1.0]), np.array([1.0]))


class TestInitialOutcome:
    def test_null_outcome_predicts_event_rate(self):
        rng = np.random.default_rng(10)
        n = 2000
        W = rng.normal(size=(n, 5))
        a = rng.integers(0, 2, n)
        y = (rng.random(n) < 0.3).astype(int)
        ds = make_dataset(a, y, W)
        fit = fit_initial_outcome(ds, seed=0, n_lambda=40)
        ybar = y.mean()
        for col in (fit.q_obs, fit.q1, fit.q0):
            assert np.max(np.abs(col - ybar)) <= 0.05

    def test_outcome_equal_to_treatment_saturates_after_bounding(self):
        rng = np.random.default_rng(11)
        n = 300
        W = rng.normal(size=(n, 3))
        a = rng.integers(0, 2, n)
        ds = make_dataset(a, a.copy(), W)
        fit = fit_initial_outcome(ds, seed=0, n_lambda=25)
        assert np.all(fit.q1 >= 0.99)
        assert np.all(fit.q0 <= 0.01)

    def test_single_binary_covariate_recovers_cell_means(self):
        # within each w the two arms share the event rate exactly, so the
        # additive-logit model can reproduce every cell mean
        blocks = []
        for a_val in (0, 1):
            for w_val, p in ((0, 0.2), (1, 0.6)):
                m = 100
                y_block = np.zeros(m, dtype=int)
                y_block[: int(p * m)] = 1
                blocks.append((np.full(m, a_val), y_block, np.full(m, w_val)))
        a = np.concatenate([b[0] for b in blocks])
        y = np.concatenate([b[1] for b in blocks])
        w = np.concatenate([b[2] for b in blocks])
        ds = make_dataset(a, y, w, names=("w",))
        fit = fit_initial_outcome(ds, seed=3, n_lambda=60)
        assert np.max(np.abs(fit.q1[w == 0] - 0.2)) < 0.02
        assert np.max(np.abs(fit.q1[w == 1] - 0.6)) < 0.02
        assert np.max(np.abs(fit.q0[w == 0] - 0.2)) < 0.02

    def test_zero_events_rejected(self):
        ds = make_dataset([1, 0, 1, 0], [0, 0, 0, 0], np.zeros((4, 1)))
        with pytest.raises(DegenerateOutcomeError):
            fit_initial_outcome(ds)

    def test_predictions_bounded(self):
        rng = np.random.default_rng(12)
        n = 150
        W = rng.normal(size=(n, 2))
        a = rng.integers(0, 2, n)
        y = a.copy()  # forces saturation
        fit = fit_initial_outcome(make_dataset(a, y, W), seed=0, n_lambda=20)
        for col in (fit.q_obs, fit.q1, fit.q0):
            assert np.all(col >= 1e-4) and np.all(col <= 1 - 1e-4)


class TestFluctuate:
    def test_score_already_solved_keeps_epsilon_zero(self):
        rng = np.random.default_rng(20)
        n = 400
        w = rng.integers(0, 2, n)
        a = rng.integers(0, 2, n)
        y = (rng.random(n) < 0.2 + 0.3 * w).astype(int)
        fit = cell_mean_fit(a, y, w)
        g = np.array([a[w == wv].mean() for wv in w])
        updated, eps = fluctuate(fit, clever_covariate(a, g), y.astype(float))
        assert eps == 0.0
        assert np.array_equal(updated.q1, fit.q1)
        assert np.array_equal(updated.q0, fit.q0)

    def test_epsilon_matches_grid_scan_oracle(self):
        rng = np.random.default_rng(21)
        n = 600
        w = rng.normal(size=n)
        a = (rng.random(n) < expit(0.5 * w)).astype(float)
        y = (rng.random(n) < expit(-1.0 + 0.8 * w + 0.4 * a)).astype(float)
        q_obs = np.clip(expit(-0.5 + 0.2 * w), 1e-4, 1 - 1e-4)  # misspecified
        q1 = q0 = q_obs
        fit = OutcomeFit(q_obs=q_obs, q1=q1, q0=q0)
        g = np.clip(expit(0.5 * w), 0.01, 0.99)
        h = clever_covariate(a, g)
        _, eps = fluctuate(fit, h, y)

        def nll(e):
            p = np.clip(expit(logit(q_obs) + e * h.h_obs), 1e-12, 1 - 1e-12)
            return -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))

        center, width = 0.0, 0.5
        for _ in range(4):
            grid = np.linspace(center - width, center + width, 201)
            vals = [nll(e) for e in grid]
            center = grid[int(np.argmin(vals))]
            width /= 50
        assert abs(eps - center) <= 1e-6

    def test_score_equation_solved_after_update(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n = 300
            w = rng.normal(size=n)
            a = (rng.random(n) < expit(0.7 * w)).astype(float)
            y = (rng.random(n) < expit(-0.5 + w - 0.5 * a)).astype(float)
            q = np.clip(expit(0.3 * w - 0.2), 1e-4, 1 - 1e-4)
            fit = OutcomeFit(q_obs=q, q1=q, q0=q)
            g = np.clip(expit(0.7 * w), 0.01, 0.99)
            h = clever_covariate(a, g)
            updated, _ = fluctuate(fit, h, y)
            resid = abs(math.fsum((h.h_obs * (y - updated.q_obs)).tolist()) / n)
            assert resid <= 1e-8

    def test_separating_clever_covariate_raises_with_diagnostic(self):
        # treated subjects all have the event: H and Y are perfectly aligned
        n = 40
        a = np.repeat([1.0, 0.0], n // 2)
        y = a.copy()
        q = np.full(n, 0.5)
        fit = OutcomeFit(q_obs=q, q1=q, q0=q)
        h = clever_covariate(a, np.full(n, 0.5))
        with pytest.raises(ConvergenceError, match="epsilon"):
            fluctuate(fit, h, y)


class TestEstimateAte:
    def test_exact_null_gives_zero_and_symmetric_ci(self):
        # every covariate row appears once per arm with the same outcome
        rng = np.random.default_rng(30)
        m = 80
        w = rng.integers(0, 2, m)
        y_row = (rng.random(m) < 0.3 + 0.2 * w).astype(int)
        a = np.r_[np.ones(m, int), np.zeros(m, int)]
        y = np.r_[y_row, y_row]
        w2 = np.r_[w, w]
        ds = make_dataset(a, y, w2, names=("w",))
        fit = cell_mean_fit(a, y, w2)
        est = estimate_ate(ds, np.full(2 * m, 0.5), fit)
        assert est.psi == 0.0
        assert est.ci_lower == -est.ci_upper

    def test_saturated_small_dataset_equals_gcomp_plugin(self):
        # n = 8, one binary covariate, saturated Q and g; every (a, w) cell
        # holds one event and one non-event so all cell means are interior
        a = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        y = np.array([1, 0, 1, 0, 0, 1, 1, 0])
        w = np.array([0, 0, 1, 1, 0, 0, 1, 1])
        ds = make_dataset(a, y, w, names=("w",))
        fit = cell_mean_fit(a, y, w)
        g = np.array([a[w == wv].mean() for wv in w])
        est = estimate_ate(ds, g, fit)
        # stratified plug-in: sum_w P(w) (mean Y | a=1,w  -  mean Y | a=0,w)
        plug = 0.0
        for wv in (0, 1):
            pw = np.mean(w == wv)
            plug += pw * (y[(a == 1) & (w == wv)].mean() - y[(a == 0) & (w == wv)].mean())
        assert est.epsilon == 0.0
        assert abs(est.psi - plug) <= 1e-10

    def test_two_binary_covariates_still_match_gcomp(self):
        rng = np.random.default_rng(31)
        n = 64
        w1, w2 = rng.integers(0, 2, n), rng.integers(0, 2, n)
        a = rng.integers(0, 2, n)
        y = rng.integers(0, 2, n)
        # force every (a, w1, w2) cell non-empty and non-degenerate
        cells = [(av, v1, v2) for av in (0, 1) for v1 in (0, 1) for v2 in (0, 1)]
        for k, (av, v1, v2) in enumerate(cells):
            a[4 * k:4 * k + 4] = av
            w1[4 * k:4 * k + 4] = v1
            w2[4 * k:4 * k + 4] = v2
            y[4 * k:4 * k + 4] = [0, 1, 1, rng.integers(0, 2)]
        ds = make_dataset(a, y, np.column_stack([w1, w2]), names=("w1", "w2"))
        strat = 2 * w1 + w2
        q1 = np.array([y[(a == 1) & (strat == s)].mean() for s in strat])
        q0 = np.array([y[(a == 0) & (strat == s)].mean() for s in strat])
        fit = OutcomeFit(q_obs=np.where(a == 1, q1, q0), q1=q1, q0=q0)
        g = np.array([a[strat == s].mean() for s in strat])
        est = estimate_ate(ds, g, fit)
        plug = 0.0
        for s in np.unique(strat):
            ps = np.mean(strat == s)
            plug += ps * (y[(a == 1) & (strat == s)].mean()
                          - y[(a == 0) & (strat == s)].mean())
        assert abs(est.psi - plug) <= 1e-10
        assert abs(est.epsilon) <= 1e-12

    def test_row_permutation_leaves_estimate_bit_identical(self):
        rng = np.random.default_rng(32)
        n = 500
        w = rng.normal(size=n)
        a = (rng.random(n) < expit(0.5 * w)).astype(int)
        y = (rng.random(n) < expit(-1 + 0.6 * w + 0.3 * a)).astype(int)
        q = np.clip(expit(-0.8 + 0.5 * w), 1e-4, 1 - 1e-4)
        g = np.clip(expit(0.5 * w), 0.01, 0.99)
        ds = make_dataset(a, y, w, names=("w",))
        q1 = np.clip(expit(-0.8 + 0.5 * w + 0.25), 1e-4, 1 - 1e-4)
        q0 = np.clip(expit(-0.8 + 0.5 * w), 1e-4, 1 - 1e-4)
        fit = OutcomeFit(q_obs=np.where(a == 1, q1, q0), q1=q1, q0=q0)
        base = estimate_ate(ds, g, fit)
        for s in range(3):
            perm = np.random.default_rng(100 + s).permutation(n)
            dsp = make_dataset(a[perm], y[perm], w[perm], names=("w",))
            fitp = OutcomeFit(q_obs=fit.q_obs[perm], q1=q1[perm], q0=q0[perm])
            got = estimate_ate(dsp, g[perm], fitp)
            assert got.psi == base.psi
            assert got.se == base.se
            assert got.epsilon == base.epsilon

    def test_misaligned_components_rejected(self):
        ds = make_dataset([1, 0, 1, 0], [1, 0, 0, 1], np.zeros((4, 1)))
        q = np.full(4, 0.5)
        fit = OutcomeFit(q_obs=q, q1=q, q0=q)
        with pytest.raises(AlignmentError):
            estimate_ate(ds, np.full(3, 0.5), fit)

    def test_double_robustness_smoke(self):
        # with either component correct, the truth lands inside 3 Sod in at
        # least 90% of replicates
        def truth_and_draw(rng, n):
            w = rng.normal(size=n)
            g_true = expit(0.8 * w)
            a = (rng.random(n) < g_true).astype(float)
            p1 = expit(-1.2 + 0.9 * w + 0.5)
            p0 = expit(-1.2 + 0.9 * w)
            y = np.where(a == 1, rng.random(n) < p1, rng.random(n) < p0).astype(float)
            return w, a, y, g_true, p1, p0

        big = np.random.default_rng(777)
        wb = big.normal(size=2_000_000)
        psi_true = float(np.mean(expit(-1.2 + 0.9 * wb + 0.5) - expit(-1.2 + 0.9 * wb)))

        n = 5000
        for q_correct in (True, False):
            hits = 0
            reps = 100
            for r in range(reps):
                rng = np.random.default_rng(10_000 + r)
                w, a, y, g_true, p1, p0 = truth_and_draw(rng, n)
                ds = make_dataset(a.astype(int), y.astype(int), w, names=("w",))
                if q_correct:
                    q1, q0 = np.clip(p1, 1e-4, 1 - 1e-4), np.clip(p0, 1e-4, 1 - 1e-4)
                    g = np.clip(np.full(n, a.mean()), 0.01, 0.99)  # misspecified
                else:
                    ybar = y.mean()
                    q1 = q0 = np.full(n, np.clip(ybar, 1e-4, 1 - 1e-4))  # misspecified
                    g = np.clip(g_true, 0.01, 0.99)
                fit = OutcomeFit(q_obs=np.where(a == 1, q1, q0), q1=q1, q0=q0)
                est = estimate_ate(ds, g, fit)
                hits += abs(est.psi - psi_true) <= 3 * est.se
            assert hits >= 90, f"q_correct={q_correct}: only {hits}/100 within 3 SE"


class TestUnadjusted:
    def test_hand_wald_example(self):
        a = np.r_[np.ones(10, int), np.zeros(10, int)]
        y = np.r_[np.ones(2, int), np.zeros(8, int), np.ones(1, int), np.zeros(9, int)]
        ds = make_dataset(a, y, np.zeros((20, 1)))
        est = unadjusted_rd(ds)
        se = math.sqrt(0.2 * 0.8 / 10 + 0.1 * 0.9 / 10)
        assert est.psi == pytest.approx(0.1, abs=1e-12)
        assert est.se == pytest.approx(se, abs=1e-12)
        assert est.ci_upper == pytest.approx(0.1 + 1.96 * se, abs=1e-12)
        assert est.ci_lower == pytest.approx(0.1 - 1.96 * se, abs=1e-12)

    def test_equal_event_rates_give_zero(self):
        a = np.r_[np.ones(8, int), np.zeros(8, int)]
        y = np.r_[[1, 1, 0, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0, 0, 0]]
        est = unadjusted_rd(make_dataset(a, y, np.zeros((16, 1))))
        assert est.psi == 0.0

    def test_empty_arm_rejected(self):
        ds = make_dataset([1, 1, 1], [0, 1, 0], np.zeros((3, 1)))
        with pytest.raises(EmptyCohortError):
            unadjusted_rd(ds)

    def test_se_equals_ic_standard_deviation(self):
        rng = np.random.default_rng(40)
        a = rng.integers(0, 2, 100)
        a[:2] = [0, 1]
        y = rng.integers(0, 2, 100)
        est = unadjusted_rd(make_dataset(a, y, np.zeros((100, 1))))
        ic = est.influence_curve
        sd = float(np.sqrt(np.mean((ic - ic.mean()) ** 2)))
        assert est.se == pytest.approx(sd / 10.0, rel=1e-12)

    def test_wald_formula_on_random_draws(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n1, n0 = rng.integers(5, 40, 2)
            y1 = rng.integers(0, 2, n1)
            y0 = rng.integers(0, 2, n0)
            a = np.r_[np.ones(n1, int), np.zeros(n0, int)]
            y = np.r_[y1, y0]
            est = unadjusted_rd(make_dataset(a, y, np.zeros((n1 + n0, 1))))
            p1, p0 = y1.mean(), y0.mean()
            wald = math.sqrt(p1 * (1 - p1) / n1 + p0 * (1 - p0) / n0)
            assert est.psi == pytest.approx(p1 - p0, abs=1e-12)
            assert est.se == pytest.approx(wald, abs=1e-12)


class TestRdFromCounts:
    def test_hand_wald_example(self):
        est = rd_from_counts(2, 10, 1, 10)
        se = math.sqrt(0.2 * 0.8 / 10 + 0.1 * 0.9 / 10)
        assert abs(est.psi - 0.1) <= 1e-10
        assert abs(est.se - se) <= 1e-10
        assert abs(est.ci_lower - (0.1 - 1.96 * se)) <= 1e-10
        assert abs(est.ci_upper - (0.1 + 1.96 * se)) <= 1e-10
        assert est.n == 20

    def test_matches_expanded_dataset_bitwise(self):
        for e1, n1, e0, n0 in [(2, 10, 1, 10), (37, 120, 11, 95), (0, 8, 3, 7)]:
            a = np.r_[np.ones(n1, int), np.zeros(n0, int)]
            y = np.r_[
                np.ones(e1, int), np.zeros(n1 - e1, int),
                np.ones(e0, int), np.zeros(n0 - e0, int),
            ]
            full = unadjusted_rd(make_dataset(a, y, np.zeros((n1 + n0, 1))))
            margins = rd_from_counts(e1, n1, e0, n0)
            assert margins.psi == full.psi
            assert margins.se == full.se
            assert margins.ci_lower == full.ci_lower
            assert margins.ci_upper == full.ci_upper

    def test_cohort_margins_round_to_reported_values(self):
        # 899 events over arms of 7767 and 13576; the split nearest the
        # reported point estimate is 446 vs 453.
        est = rd_from_counts(446, 7767, 453, 13576)
        assert round(est.psi, 3) == 0.024
        assert round(est.ci_lower, 3) == 0.018
        assert round(est.ci_upper, 3) == 0.030

    def test_rejects_bad_counts(self):
        with pytest.raises(InputError):
            rd_from_counts(3, 2, 1, 10)
        with pytest.raises(InputError):
            rd_from_counts(-1, 5, 1, 10)
        with pytest.raises(InputError):
            rd_from_counts(1.5, 5, 1, 10)
        with pytest.raises(InputError):
            rd_from_counts(True, 5, 1, 10)
        with pytest.raises(EmptyCohortError):
            rd_from_counts(0, 0, 1, 10)
