import json
import math

import numpy as np
import pytest
from scipy.special import expit

from tlkit.dataset import AnalyticDataset
from tlkit.errors import InputError, SpecError
from tlkit.plasmode import (
    CovariateSample,
    MechanismSpec,
    ReplicateResult,
    aggregate_rows,
    bootstrap_covariates,
    calibrate_mechanism,
    inject_mechanisms,
    run_comparison,
    true_effect,
)
from tlkit.propensity import PsConfig, PsModelId


def make_source(n, p, seed=7, binary_last=False):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, p))
    if binary_last:
        W[:, -1] = (W[:, -1] > 0).astype(float)
    return AnalyticDataset.from_arrays(
        subject_id=[f"s{i}" for i in range(n)],
        a=rng.integers(0, 2, n),
        y=rng.integers(0, 2, n),
        delta=np.ones(n, dtype=int),
        dense=W,
        dense_names=[f"w{j}" for j in range(p)],
    )


def binary_source(n, prevalences, seed=3):
    rng = np.random.default_rng(seed)
    cols = [(rng.random(n) < p).astype(float) for p in prevalences]
    W = np.column_stack(cols)
    return AnalyticDataset.from_arrays(
        subject_id=[f"s{i}" for i in range(n)],
        a=rng.integers(0, 2, n),
        y=rng.integers(0, 2, n),
        delta=np.ones(n, dtype=int),
        dense=W,
        dense_names=[f"z{j}" for j in range(len(prevalences))],
    )


class TestCovariateSample:
    def test_from_dataset_shape_and_names(self):
        ds = make_source(50, 3)
        sample = CovariateSample.from_dataset(ds)
        assert sample.m == 50
        assert sample.names == ("w0", "w1", "w2")
        assert np.array_equal(sample.matrix, ds.feature_matrix())

    def test_unknown_column_raises(self):
        sample = CovariateSample.from_dataset(make_source(10, 2))
        with pytest.raises(SpecError, match="unknown covariate"):
            sample.column("nope")

    def test_nonfinite_matrix_rejected(self):
        with pytest.raises(InputError):
            CovariateSample(("a",), np.array([[1.0], [np.nan]]))

    def test_width_mismatch_rejected(self):
        with pytest.raises(InputError):
            CovariateSample(("a", "b"), np.ones((4, 3)))


class TestBootstrapCovariates:
    def test_rows_form_multiset_of_source_rows(self):
        ds = make_source(80, 4)
        sample = bootstrap_covariates(ds, seed=11)
        assert sample.matrix.shape == (80, 4)
        source_rows = {tuple(row) for row in ds.feature_matrix()}
        for row in sample.matrix:
            assert tuple(row) in source_rows
        # with-replacement draws at m = n nearly always repeat some row
        assert len({tuple(r) for r in sample.matrix}) < 80

    def test_prevalence_within_binomial_band(self):
        prevalences = [0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.75, 0.9]
        ds = binary_source(250, prevalences * 2)
        source_p = ds.feature_matrix().mean(axis=0)
        tol = 4.0 * np.sqrt(source_p * (1.0 - source_p) / ds.n)
        hits = 0
        total = 0
        for seed in range(100):
            boot_p = bootstrap_covariates(ds, seed=seed).matrix.mean(axis=0)
            hits += int(np.sum(np.abs(boot_p - source_p) <= tol))
            total += len(source_p)
        assert hits / total >= 0.95

    def test_perfect_correlation_preserved(self):
        # row-wise resampling cannot break a within-row functional tie
        rng = np.random.default_rng(0)
        base = rng.normal(size=60)
        W = np.column_stack([base, 2.0 * base + 1.0])
        ds = AnalyticDataset.from_arrays(
            subject_id=[f"s{i}" for i in range(60)],
            a=rng.integers(0, 2, 60),
            y=rng.integers(0, 2, 60),
            delta=np.ones(60, dtype=int),
            dense=W,
            dense_names=["u", "v"],
        )
        for seed in range(20):
            sample = bootstrap_covariates(ds, seed=seed)
            assert np.array_equal(sample.column("v"),
                                  2.0 * sample.column("u") + 1.0)

    def test_treatment_and_outcome_never_read(self):
        ds = make_source(40, 3, seed=5)
        flipped = AnalyticDataset.from_arrays(
            subject_id=ds.subject_id,
            a=1 - ds.a,
            y=1 - ds.y,
            delta=ds.delta,
            dense=ds.dense,
            dense_names=ds.dense_names,
        )
        for seed in (0, 9):
            one = bootstrap_covariates(ds, seed=seed)
            two = bootstrap_covariates(flipped, seed=seed)
            assert np.array_equal(one.matrix, two.matrix)

    def test_size_handling(self):
        ds = make_source(30, 2)
        assert bootstrap_covariates(ds, seed=1).m == 30
        assert bootstrap_covariates(ds, m=7, seed=1).m == 7
        with pytest.raises(InputError):
            bootstrap_covariates(ds, m=0, seed=1)


class TestMechanismSpec:
    def spec(self, **overrides):
        base = dict(
            treatment_intercept=-0.5,
            treatment_coefficients={"w0": 0.7},
            outcome_intercept=-2.0,
            outcome_treatment_coefficient=0.4,
            outcome_coefficients={"w1": 0.6},
        )
        base.update(overrides)
        return MechanismSpec(**base)

    def test_unknown_covariate_rejected(self):
        names = ["w0", "w1"]
        self.spec().validate(names)
        with pytest.raises(SpecError, match="treatment mechanism"):
            self.spec(treatment_coefficients={"bad": 1.0}).validate(names)
        with pytest.raises(SpecError, match="outcome mechanism"):
            self.spec(outcome_coefficients={"bad": 1.0}).validate(names)

    def test_nonfinite_values_rejected(self):
        names = ["w0", "w1"]
        with pytest.raises(SpecError):
            self.spec(treatment_coefficients={"w0": np.inf}).validate(names)
        with pytest.raises(SpecError):
            self.spec(outcome_intercept=np.nan).validate(names)

    def test_target_must_be_interior(self):
        names = ["w0", "w1"]
        for bad in (0.0, 1.0, 1.2, -0.1):
            with pytest.raises(SpecError, match="strictly inside"):
                self.spec(target_event_rate=bad).validate(names)

    def test_json_round_trip(self):
        spec = self.spec(target_treatment_prevalence=0.3, target_event_rate=0.05)
        again = MechanismSpec.from_json(spec.to_json())
        assert again == spec
        assert json.loads(spec.to_json())["target_event_rate"] == 0.05

    def test_from_json_rejects_malformed(self):
        with pytest.raises(SpecError, match="not valid JSON"):
            MechanismSpec.from_json("{nope")
        with pytest.raises(SpecError, match="unknown mechanism field"):
            MechanismSpec.from_json(json.dumps({
                "treatment_intercept": 0, "outcome_intercept": 0,
                "outcome_treatment_coefficient": 0, "bogus": 1}))
        with pytest.raises(SpecError, match="required"):
            MechanismSpec.from_json(json.dumps({"treatment_intercept": 0}))
        with pytest.raises(SpecError, match="malformed"):
            MechanismSpec.from_json(json.dumps({
                "treatment_intercept": 0, "outcome_intercept": 0,
                "outcome_treatment_coefficient": 0,
                "treatment_coefficients": {"w0": "wide"}}))


class TestCalibration:
    def test_marginals_hit_targets(self):
        ds = make_source(300, 3, seed=21)
        covs = CovariateSample.from_dataset(ds)
        spec = MechanismSpec(
            treatment_intercept=0.0,
            treatment_coefficients={"w0": 0.9, "w1": -0.4},
            outcome_intercept=0.0,
            outcome_treatment_coefficient=0.5,
            outcome_coefficients={"w0": 0.8},
            target_treatment_prevalence=0.35,
            target_event_rate=0.05,
        )
        cal = calibrate_mechanism(spec, covs, seed=4)
        # verify on an independent draw: sampling error ~5e-4 at this size
        rng = np.random.default_rng(123)
        idx = rng.integers(0, covs.m, size=10 ** 6)
        draw = CovariateSample(covs.names, covs.matrix[idx])
        p_a = expit(cal.treatment_lp(draw))
        assert abs(p_a.mean() - 0.35) <= 0.005
        a = (rng.random(draw.m) < p_a).astype(float)
        p_y = expit(cal.outcome_lp(draw, a))
        assert abs(p_y.mean() - 0.05) <= 0.005

    def test_without_targets_is_identity(self):
        ds = make_source(100, 2)
        spec = MechanismSpec(0.2, {"w0": 1.0}, -1.0, 0.3, {})
        assert calibrate_mechanism(
            spec, CovariateSample.from_dataset(ds), seed=0) == spec

    def test_unreachable_target_raises(self):
        # half the rows sit at logit -1000: no intercept reaches mean 0.9
        ds = binary_source(200, [0.5], seed=1)
        spec = MechanismSpec(
            treatment_intercept=0.0,
            treatment_coefficients={"z0": -1000.0},
            outcome_intercept=0.0,
            outcome_treatment_coefficient=0.0,
            outcome_coefficients={},
            target_treatment_prevalence=0.9,
        )
        with pytest.raises(SpecError, match="unreachable"):
            calibrate_mechanism(spec, CovariateSample.from_dataset(ds), seed=0)

    def test_deterministic(self):
        ds = make_source(150, 2, seed=2)
        covs = CovariateSample.from_dataset(ds)
        spec = MechanismSpec(0.0, {"w0": 0.5}, 0.0, 0.2, {"w1": 0.4},
                             target_treatment_prevalence=0.4,
                             target_event_rate=0.1)
        one = calibrate_mechanism(spec, covs, seed=9)
        two = calibrate_mechanism(spec, covs, seed=9)
        assert one == two


class TestInjectMechanisms:
    def test_deterministic_and_seed_sensitive(self):
        sample = bootstrap_covariates(make_source(500, 2), seed=1)
        spec = MechanismSpec(-0.3, {"w0": 0.8}, -1.5, 0.5, {"w1": 0.7})
        a1, y1 = inject_mechanisms(sample, spec, seed=5)
        a2, y2 = inject_mechanisms(sample, spec, seed=5)
        a3, y3 = inject_mechanisms(sample, spec, seed=6)
        assert np.array_equal(a1, a2) and np.array_equal(y1, y2)
        assert not (np.array_equal(a1, a3) and np.array_equal(y1, y3))
        assert set(np.unique(a1)) <= {0, 1}
        assert set(np.unique(y1)) <= {0, 1}

    def test_unknown_covariate_rejected(self):
        sample = bootstrap_covariates(make_source(20, 2), seed=0)
        spec = MechanismSpec(0.0, {"w9": 1.0}, 0.0, 0.0, {})
        with pytest.raises(SpecError, match="unknown covariate"):
            inject_mechanisms(sample, spec, seed=0)

    def test_treatment_prevalence_matches_mechanism(self):
        sample = bootstrap_covariates(make_source(4000, 2, seed=8), seed=2)
        spec = MechanismSpec(-0.6, {"w0": 0.5}, -1.0, 0.0, {})
        a, _ = inject_mechanisms(sample, spec, seed=3)
        expected = expit(spec.treatment_lp(sample)).mean()
        band = 4.0 * math.sqrt(expected * (1 - expected) / sample.m)
        assert abs(a.mean() - expected) <= band

    def test_outcome_depends_on_realized_treatment(self):
        # with these logits Y is a near-certain copy of the drawn A
        sample = bootstrap_covariates(make_source(500, 2), seed=4)
        spec = MechanismSpec(0.0, {"w0": 1.0}, -25.0, 50.0, {})
        a, y = inject_mechanisms(sample, spec, seed=7)
        assert 0 < a.mean() < 1
        assert np.array_equal(a, y)


class TestTrueEffect:
    def test_null_mechanism_exact_zero(self):
        covs = CovariateSample.from_dataset(make_source(200, 2))
        spec = MechanismSpec(0.0, {"w0": 1.0}, -1.0, 0.0, {"w1": 0.8})
        result = true_effect(spec, covs, seed=0)
        assert result.psi == 0.0
        assert result.mc_se == 0.0

    def test_single_binary_covariate_enumeration(self):
        # z is exactly half ones, so the estimand enumerates in closed form
        z = np.zeros((10, 1))
        z[5:, 0] = 1.0
        covs = CovariateSample(("z",), z)
        spec = MechanismSpec(
            treatment_intercept=0.0,
            treatment_coefficients={},
            outcome_intercept=-2.0,
            outcome_treatment_coefficient=1.0,
            outcome_coefficients={"z": 1.0},
        )
        exact = 0.5 * (expit(-1.0) - expit(-2.0)) + 0.5 * (expit(0.0) - expit(-1.0))
        result = true_effect(spec, covs, seed=13)
        assert result.mc_se > 0
        assert abs(result.psi - exact) <= 3.0 * result.mc_se

    def test_irrelevant_covariate_changes_nothing(self):
        ds = make_source(300, 3, seed=17)
        covs = CovariateSample.from_dataset(ds)
        spec = MechanismSpec(0.0, {"w0": 0.5}, -1.2, 0.6, {"w0": 0.7})
        with_extra = MechanismSpec(0.0, {"w0": 0.5}, -1.2, 0.6,
                                   {"w0": 0.7, "w2": 0.0})
        one = true_effect(spec, covs, seed=3)
        two = true_effect(with_extra, covs, seed=3)
        assert one.psi == two.psi
        three = true_effect(with_extra, covs, seed=4)
        assert abs(one.psi - three.psi) <= 3.0 * math.hypot(one.mc_se, three.mc_se)

    def test_small_mc_size_rejected(self):
        covs = CovariateSample.from_dataset(make_source(50, 1))
        spec = MechanismSpec(0.0, {}, 0.0, 0.1, {})
        with pytest.raises(InputError, match="1e5"):
            true_effect(spec, covs, n_mc=10 ** 4, seed=0)

    def test_mc_size_auto_increases(self):
        # row effects split between ~0 and ~0.9, so sd is far too large
        # for the requested 1e5 draws to reach the 5e-4 target
        z = np.zeros((10, 1))
        z[5:, 0] = 1.0
        covs = CovariateSample(("z",), z)
        spec = MechanismSpec(0.0, {}, -3.0, 6.0, {"z": -20.0})
        result = true_effect(spec, covs, n_mc=10 ** 5, seed=1)
        assert result.n_mc >= 8 * 10 ** 5
        assert result.mc_se <= 5e-4


NULL_SPEC = MechanismSpec(
    treatment_intercept=-0.4,
    treatment_coefficients={},
    outcome_intercept=-1.4,
    outcome_treatment_coefficient=0.5,
    outcome_coefficients={"w0": 0.8},
)
FAST = PsConfig(n_lambda=30)


@pytest.fixture(scope="module")
def null_report():
    # randomized treatment: TMLE should be unbiased for every PS model
    ds = make_source(150, 2)
    return run_comparison(ds, [1], NULL_SPEC, n_replicates=500, seed=31,
                          config=FAST)


class TestRunComparison:
    def small_report(self, models=(1,), seed=42, n_replicates=3, ds=None):
        if ds is None:
            ds = make_source(120, 2, seed=1)
        return run_comparison(ds, list(models), NULL_SPEC,
                              n_replicates=n_replicates, seed=seed, config=FAST)

    def test_same_seed_bit_identical(self):
        one = self.small_report()
        two = self.small_report()
        assert one == two
        assert one.to_rows_csv() == two.to_rows_csv()
        assert one.to_long_csv() == two.to_long_csv()
        assert one.to_summary_text() == two.to_summary_text()

    def test_outcome_blind_under_label_randomization(self):
        ds = make_source(120, 2, seed=1)
        rng = np.random.default_rng(99)
        perm = rng.permutation(ds.n)
        permuted = AnalyticDataset.from_arrays(
            subject_id=ds.subject_id, a=ds.a[perm], y=ds.y[perm],
            delta=ds.delta, dense=ds.dense, dense_names=ds.dense_names)
        noise = AnalyticDataset.from_arrays(
            subject_id=ds.subject_id, a=rng.integers(0, 2, ds.n),
            y=rng.integers(0, 2, ds.n), delta=ds.delta, dense=ds.dense,
            dense_names=ds.dense_names)
        spec = MechanismSpec(-0.3, {"w0": 0.6}, -1.2, 0.4, {"w0": 0.7},
                             target_event_rate=0.2)
        reports = [
            run_comparison(d, [1, 4], spec, n_replicates=2, seed=7, config=FAST)
            for d in (ds, permuted, noise)
        ]
        assert reports[0] == reports[1]
        assert reports[0] == reports[2]

    def test_replicate_streams_indexed_not_ordered(self):
        # growing R extends the report without disturbing earlier replicates
        short = self.small_report(n_replicates=3)
        longer = self.small_report(n_replicates=5)
        assert longer.psi_true == short.psi_true
        head = tuple(r for r in longer.rows if r.replicate < 3)
        assert head == short.rows

    def test_model_numbers_and_ids_equivalent(self):
        by_number = self.small_report(models=(1, 4), n_replicates=2)
        by_id = self.small_report(
            models=(PsModelId.from_number(1), PsModelId.from_number(4)),
            n_replicates=2)
        assert by_number == by_id

    def test_input_validation(self):
        ds = make_source(60, 2)
        with pytest.raises(InputError, match="at least 2"):
            run_comparison(ds, [1], NULL_SPEC, n_replicates=1, seed=0)
        with pytest.raises(InputError, match="nonempty"):
            run_comparison(ds, [], NULL_SPEC, n_replicates=2, seed=0)
        with pytest.raises(InputError, match="duplicate"):
            run_comparison(ds, [1, 1], NULL_SPEC, n_replicates=2, seed=0)
        with pytest.raises(InputError, match="integer"):
            run_comparison(ds, [1], NULL_SPEC, n_replicates=2, seed="abc")

    @pytest.mark.filterwarnings("ignore::UserWarning")
    def test_failed_replicates_recorded_and_excluded(self):
        # rare treatment at n = 40: some replicates yield a single-class
        # treatment column and the PS fit raises a fold error
        ds = make_source(40, 2, seed=9)
        rare = MechanismSpec(-3.0, {}, -0.5, 0.3, {"w0": 0.5})
        report = run_comparison(ds, [1], rare, n_replicates=12, seed=0,
                                config=FAST)
        agg = report.aggregates[0]
        assert agg.n_failed > 0
        assert agg.n_ok > 0
        assert agg.n_ok + agg.n_failed == 12
        failed = [r for r in report.rows if r.failed]
        assert all("FoldError" in r.error for r in failed)
        assert all(math.isnan(r.psi_hat) for r in failed)
        good = np.array([r.psi_hat for r in report.rows if not r.failed])
        assert agg.bias == pytest.approx(good.mean() - report.psi_true)
        assert f"{agg.n_failed} replicate(s) failed" in report.to_summary_text()
        for line in report.to_rows_csv().splitlines()[1:]:
            assert line.count(",") == 6

    def test_every_replicate_failing_is_survivable(self):
        # an outcome mechanism with essentially no events breaks every fit
        ds = make_source(60, 2, seed=3)
        dead = MechanismSpec(0.0, {}, -12.0, 0.2, {})
        report = run_comparison(ds, [1], dead, n_replicates=2, seed=1,
                                config=FAST)
        agg = report.aggregates[0]
        assert agg.n_ok == 0 and agg.n_failed == 2
        assert math.isnan(agg.bias) and math.isnan(agg.mse)
        assert report.recommended_model() is None
        assert "none (every replicate failed)" in report.to_summary_text()
        assert json.loads(report.to_json())["recommended_model"] is None

    def test_null_confounding_bias_within_mc_error(self, null_report):
        agg = null_report.aggregates[0]
        assert agg.n_ok == 500
        psis = np.array([r.psi_hat for r in null_report.rows if not r.failed])
        mc_se = psis.std() / math.sqrt(len(psis))
        assert abs(agg.bias) <= 3.0 * mc_se

    def test_null_confounding_coverage_sane(self, null_report):
        assert 0.90 <= null_report.aggregates[0].coverage <= 0.99

    def test_aggregates_recomputable_from_rows(self, null_report):
        assert aggregate_rows(null_report.rows, null_report.psi_true) \
            == null_report.aggregates

    def test_mse_dominates_squared_bias(self, null_report):
        for agg in null_report.aggregates:
            assert agg.mse >= agg.bias ** 2
            assert agg.mse == pytest.approx(agg.bias ** 2 + agg.variance)
            assert 0.0 <= agg.coverage <= 1.0

    def test_seed_change_stays_within_mc_tolerance(self):
        ds = make_source(150, 2)
        one = run_comparison(ds, [1], NULL_SPEC, n_replicates=60, seed=1,
                             config=FAST)
        two = run_comparison(ds, [1], NULL_SPEC, n_replicates=60, seed=2,
                             config=FAST)
        assert one != two

        def spread(report):
            psis = np.array([r.psi_hat for r in report.rows if not r.failed])
            sq = (psis - report.psi_true) ** 2
            n = len(psis)
            return psis.std() / math.sqrt(n), sq.std() / math.sqrt(n)

        se1, qe1 = spread(one)
        se2, qe2 = spread(two)
        a1, a2 = one.aggregates[0], two.aggregates[0]
        assert abs(a1.bias - a2.bias) <= 4.0 * math.hypot(se1, se2)
        assert abs(a1.mse - a2.mse) <= 4.0 * math.hypot(qe1, qe2)
        # worst-case binomial spread for a coverage proportion
        assert abs(a1.coverage - a2.coverage) <= 4.0 * 0.5 * math.sqrt(2.0 / 60)

    def test_long_table_lists_three_metrics_per_model(self):
        report = self.small_report(models=(1, 4), n_replicates=2)
        lines = report.to_long_csv().splitlines()
        assert lines[0] == "model,metric,value"
        assert len(lines) == 1 + 2 * 3
        metrics = {tuple(line.split(",")[:2]) for line in lines[1:]}
        assert metrics == {
            ("1", "bias"), ("1", "mse"), ("1", "coverage"),
            ("4", "bias"), ("4", "mse"), ("4", "coverage")}


class TestAggregation:
    def rows_for(self, number, psis, cis, psi_true=None, start=0):
        out = []
        for i, (psi, ci) in enumerate(zip(psis, cis)):
            out.append(ReplicateResult(number, start + i, psi,
                                       0.1, ci[0], ci[1]))
        return out

    def test_hand_example(self):
        rows = self.rows_for(1, [0.25, 0.75], [(0.2, 0.6), (0.6, 0.9)])
        rows.append(ReplicateResult(1, 2, float("nan"), float("nan"),
                                    float("nan"), float("nan"), error="boom"))
        (agg,) = aggregate_rows(rows, psi_true=0.5)
        assert agg.n_ok == 2 and agg.n_failed == 1
        assert agg.bias == pytest.approx(0.0)
        assert agg.variance == pytest.approx(0.0625)
        assert agg.mse == pytest.approx(0.0625)
        assert agg.coverage == 0.5

    def test_recommended_model_tie_breaking(self):
        t = 0.5
        d = 0.1
        rows = []
        # model 1: bias 0, variance d^2; model 2: bias d, variance 0.
        # equal MSE, so the |bias| tiebreak should pick model 1
        rows += self.rows_for(1, [t + d, t - d], [(0, 1), (0, 1)])
        rows += self.rows_for(2, [t + d, t + d], [(0, 1), (0, 1)])
        report = _report_from(rows, psi_true=t)
        assert report.performance(1).mse == report.performance(2).mse
        assert report.recommended_model() == 1
        # model 7 duplicates model 2 exactly: number breaks the tie
        rows2 = self.rows_for(2, [t + d, t + d], [(0, 1), (0, 1)])
        rows2 += self.rows_for(7, [t + d, t + d], [(0, 1), (0, 1)])
        assert _report_from(rows2, psi_true=t).recommended_model() == 2

    def test_unknown_model_lookup_raises(self):
        report = _report_from(self.rows_for(1, [0.5], [(0, 1)]), psi_true=0.5)
        with pytest.raises(InputError):
            report.performance(3)


def _report_from(rows, psi_true):
    from tlkit.plasmode import SimulationReport

    rows = tuple(rows)
    return SimulationReport(
        rows=rows,
        aggregates=aggregate_rows(rows, psi_true),
        model_numbers=tuple(sorted({r.model_number for r in rows})),
        n_replicates=max(r.replicate for r in rows) + 1,
        master_seed=0,
        psi_true=psi_true,
        psi_true_mc_se=0.0,
        bootstrap_size=2,
        spec=NULL_SPEC,
    )
