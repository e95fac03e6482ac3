import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlkit.errors import InputError, MalformedCIError
from tlkit.sensitivity import (
    SensitivityCurve,
    ShiftedEstimate,
    compute_g_value,
    sensitivity_curve,
    shift_estimate,
)
from tlkit.tmle import TmleEstimate


def make_estimate(psi, lower, upper):
    return TmleEstimate(
        psi=psi,
        epsilon=0.0,
        influence_curve=np.zeros(3),
        se=(upper - lower) / (2 * 1.96),
        ci_lower=lower,
        ci_upper=upper,
        n=3,
        score_residual=0.0,
        model_label="m",
    )


finite = st.floats(
    min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False
)


class TestShiftEstimate:
    def test_zero_gap_is_identity(self):
        shifted = shift_estimate(0.005, 0.0, ci=(-0.027, 0.038))
        assert shifted.estimate == 0.005
        assert shifted.lower == -0.027
        assert shifted.upper == 0.038

    def test_hand_arithmetic(self):
        shifted = shift_estimate(0.005, 0.01, ci=(-0.027, 0.038))
        assert shifted.estimate == pytest.approx(-0.005, abs=1e-15)
        assert shifted.lower == pytest.approx(-0.037, abs=1e-15)
        assert shifted.upper == pytest.approx(0.028, abs=1e-15)

    def test_accepts_fitted_estimate(self):
        est = make_estimate(0.005, -0.027, 0.038)
        shifted = shift_estimate(est, 0.01)
        assert shifted.estimate == pytest.approx(-0.005, abs=1e-15)
        assert isinstance(shifted, ShiftedEstimate)

    @given(g1=finite, g2=finite, point=finite)
    def test_translation_composes(self, g1, g2, point):
        lower, upper = point - 0.5, point + 0.5
        twice = shift_estimate(
            shift_estimate(point, g1, ci=(lower, upper)).estimate,
            g2,
            ci=(lower - g1, upper - g1),
        )
        once = shift_estimate(point, g1 + g2, ci=(lower, upper))
        assert twice.estimate == pytest.approx(once.estimate, abs=1e-12)
        assert twice.lower == pytest.approx(once.lower, abs=1e-12)
        assert twice.upper == pytest.approx(once.upper, abs=1e-12)

    @given(gap=finite, point=finite, half=st.floats(min_value=0.0, max_value=5.0))
    def test_width_preserved(self, gap, point, half):
        shifted = shift_estimate(point, gap, ci=(point - half, point + half))
        assert shifted.upper - shifted.lower == pytest.approx(2 * half, abs=1e-12)

    def test_malformed_ci(self):
        with pytest.raises(MalformedCIError):
            shift_estimate(0.0, 0.0, ci=(0.1, -0.1))

    def test_rejects_nonfinite(self):
        with pytest.raises(InputError):
            shift_estimate(float("nan"), 0.0, ci=(0.0, 1.0))
        with pytest.raises(InputError):
            shift_estimate(0.0, float("inf"), ci=(0.0, 1.0))

    def test_bare_number_without_ci(self):
        with pytest.raises(InputError):
            shift_estimate(0.005, 0.01)


def negated(lower, upper, reference_positive):
    positive = lower > 0.0 or upper < 0.0
    return positive != reference_positive


def first_flip_step(lower, upper, step=1e-4, max_steps=1200):
    """Smallest k such that a gap of +-k*step changes the null status."""
    reference = lower > 0.0 or upper < 0.0
    for k in range(max_steps):
        gap = k * step
        if negated(lower - gap, upper - gap, reference):
            return k
        if negated(lower + gap, upper + gap, reference):
            return k
    raise AssertionError("no flip within the scanned grid")


class TestComputeGValue:
    def test_published_value(self):
        assert compute_g_value(0.005, (-0.027, 0.038)) == pytest.approx(
            0.027, abs=1e-10
        )

    def test_accepts_fitted_estimate(self):
        est = make_estimate(0.005, -0.027, 0.038)
        assert compute_g_value(est) == pytest.approx(0.027, abs=1e-10)

    @given(c=st.floats(min_value=1e-6, max_value=5.0))
    def test_symmetric_interval(self, c):
        assert compute_g_value(0.0, (-c, c)) == c

    def test_positive_interval_grid_scan(self):
        # 0 outside the CI: the flip lands exactly on the G-value step.
        g = compute_g_value(0.03, (0.01, 0.05))
        assert g == pytest.approx(0.01, abs=1e-12)
        assert first_flip_step(0.01, 0.05) == 100

    @given(
        lower_i=st.integers(min_value=-500, max_value=500),
        width_i=st.integers(min_value=0, max_value=500),
    )
    @settings(max_examples=200, deadline=None)
    def test_grid_scan_minimality(self, lower_i, width_i):
        # Integer-scaled bounds keep the 1e-4 grid arithmetic exact.  A
        # positive finding is negated the moment a bound reaches 0, so the
        # first flip is at G itself; a null finding must strictly cross,
        # so the first flip is one grid step past G.
        step = 1e-4
        upper_i = lower_i + width_i
        lower, upper = lower_i * step, upper_i * step
        g = compute_g_value((lower + upper) / 2, (lower, upper))
        expected_g_steps = min(abs(lower_i), abs(upper_i))
        assert g == pytest.approx(expected_g_steps * step, rel=1e-12, abs=0)
        positive = lower > 0.0 or upper < 0.0
        expected_flip = expected_g_steps + (0 if positive else 1)
        assert first_flip_step(lower, upper, step=step) == expected_flip

    @given(
        lower=st.floats(min_value=-5.0, max_value=5.0, allow_nan=False),
        width=st.floats(min_value=0.0, max_value=5.0, allow_nan=False),
    )
    def test_label_swap_invariance(self, lower, width):
        upper = lower + width
        point = (lower + upper) / 2
        assert compute_g_value(-point, (-upper, -lower)) == compute_g_value(
            point, (lower, upper)
        )

    def test_malformed_ci(self):
        with pytest.raises(MalformedCIError):
            compute_g_value(0.0, (0.2, 0.1))


class TestSensitivityCurve:
    def test_zero_gap_row_is_unshifted(self):
        curve = sensitivity_curve(0.005, -0.01, 0.01, 5, ci=(-0.027, 0.038))
        assert curve.gaps[2] == 0.0
        assert curve.shifted_estimate[2] == 0.005
        assert curve.shifted_lower[2] == -0.027
        assert curve.shifted_upper[2] == 0.038

    def test_shifted_estimate_strictly_decreasing(self):
        curve = sensitivity_curve(0.005, -0.03, 0.03, 25, ci=(-0.027, 0.038))
        assert np.all(np.diff(curve.shifted_estimate) < 0)

    def test_width_constant_over_grid(self):
        curve = sensitivity_curve(0.005, -0.03, 0.03, 25, ci=(-0.027, 0.038))
        widths = curve.shifted_upper - curve.shifted_lower
        assert np.allclose(widths, 0.038 - (-0.027), atol=1e-12, rtol=0.0)

    def test_adjustment_units_hand_example(self):
        # Denominator |0.024 - 0.005| = 0.019, so a gap of 0.019 is one unit.
        curve = sensitivity_curve(
            0.005,
            0.0,
            0.038,
            3,
            adjusted_vs_unadjusted_gap=0.019,
            ci=(-0.027, 0.038),
        )
        assert curve.gaps[1] == pytest.approx(0.019, abs=1e-15)
        assert curve.gap_adj_units[1] == pytest.approx(1.0, abs=1e-12)

    def test_delta_units_scale(self):
        curve = sensitivity_curve(
            0.005, -0.02, 0.02, 9, sd_outcome=0.5, ci=(-0.027, 0.038)
        )
        assert np.allclose(curve.gap_delta_units, curve.gaps / 0.5, atol=0, rtol=0)

    def test_unit_columns_positive_multiple_of_gaps(self):
        curve = sensitivity_curve(
            0.0,
            -0.05,
            0.05,
            11,
            adjusted_vs_unadjusted_gap=0.019,
            sd_outcome=0.21,
            ci=(-0.01, 0.01),
        )
        nonzero = curve.gaps != 0.0
        for units in (curve.gap_delta_units, curve.gap_adj_units):
            ratio = units[nonzero] / curve.gaps[nonzero]
            assert np.all(ratio > 0)
            assert np.allclose(ratio, ratio[0], rtol=1e-12)

    def test_g_value_embedded(self):
        curve = sensitivity_curve(0.005, -0.01, 0.01, 5, ci=(-0.027, 0.038))
        assert curve.g_value == compute_g_value(0.005, (-0.027, 0.038))

    def test_missing_denominators_drop_columns_silently(self):
        curve = sensitivity_curve(0.005, -0.01, 0.01, 5, ci=(-0.027, 0.038))
        assert curve.gap_delta_units is None
        assert curve.gap_adj_units is None
        header = curve.to_csv().splitlines()[0]
        assert header == "gap,shifted_estimate,shifted_lower,shifted_upper"

    def test_zero_denominator_warns_and_omits(self):
        with pytest.warns(UserWarning, match="adjustment unit"):
            curve = sensitivity_curve(
                0.005,
                -0.01,
                0.01,
                5,
                adjusted_vs_unadjusted_gap=0.0,
                ci=(-0.027, 0.038),
            )
        assert curve.gap_adj_units is None

    def test_negative_denominator_warns_and_omits(self):
        with pytest.warns(UserWarning, match="effect-size unit"):
            curve = sensitivity_curve(
                0.005, -0.01, 0.01, 5, sd_outcome=-1.0, ci=(-0.027, 0.038)
            )
        assert curve.gap_delta_units is None

    def test_csv_full_header_and_roundtrip(self):
        curve = sensitivity_curve(
            0.005,
            -0.03,
            0.03,
            7,
            adjusted_vs_unadjusted_gap=0.019,
            sd_outcome=0.21,
            ci=(-0.027, 0.038),
        )
        lines = curve.to_csv().splitlines()
        assert lines[0] == (
            "gap,gap_delta_units,gap_adj_units,"
            "shifted_estimate,shifted_lower,shifted_upper"
        )
        assert len(lines) == 1 + 7
        row = lines[1 + 3].split(",")
        assert float(row[0]) == curve.gaps[3]
        assert float(row[3]) == curve.shifted_estimate[3]

    def test_csv_deterministic(self):
        args = dict(
            gap_min=-0.03,
            gap_max=0.03,
            steps=13,
            adjusted_vs_unadjusted_gap=0.019,
            sd_outcome=0.21,
            ci=(-0.027, 0.038),
        )
        assert (
            sensitivity_curve(0.005, **args).to_csv()
            == sensitivity_curve(0.005, **args).to_csv()
        )

    def test_accepts_fitted_estimate(self):
        est = make_estimate(0.005, -0.027, 0.038)
        curve = sensitivity_curve(est, -0.01, 0.01, 5)
        assert curve.estimate == 0.005
        assert isinstance(curve, SensitivityCurve)

    def test_rejects_bad_grid(self):
        with pytest.raises(InputError):
            sensitivity_curve(0.0, 0.01, -0.01, 5, ci=(-0.1, 0.1))
        with pytest.raises(InputError):
            sensitivity_curve(0.0, 0.0, 0.0, 5, ci=(-0.1, 0.1))
        with pytest.raises(InputError):
            sensitivity_curve(0.0, -0.01, 0.01, 1, ci=(-0.1, 0.1))

    def test_rejects_malformed_ci(self):
        with pytest.raises(MalformedCIError):
            sensitivity_curve(0.0, -0.01, 0.01, 5, ci=(0.1, -0.1))
