"""Causal-gap sensitivity analysis on the risk-difference scale.

The gap is the unidentified causal bias psi_obs - psi_causal, so shifting an
estimate by a hypothetical gap is a pure translation of the point estimate
and both confidence bounds.  The G-value is the size of the minimal gap that
would negate the study finding: for a positive finding (CI excluding 0) the
smallest |gap| that pulls the nearer bound onto 0, and for a null finding
(CI containing 0) the smallest |gap| that pushes a bound across 0.  Both
cases reduce to min(|lower|, |upper|).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError, MalformedCIError


def _as_interval(estimate, ci=None):
    """Normalize (TmleEstimate) or (number, (lower, upper)) to three floats."""
    if ci is None:
        try:
            point = float(estimate.psi)
            lower = float(estimate.ci_lower)
            upper = float(estimate.ci_upper)
        except AttributeError:
            raise InputError(
                "pass a fitted estimate, or a number together with ci=(lower, upper)"
            ) from None
    else:
        point = float(estimate)
        lower, upper = (float(b) for b in ci)
    for label, value in (("estimate", point), ("lower", lower), ("upper", upper)):
        if not math.isfinite(value):
            raise InputError(f"{label} is not finite")
    if lower > upper:
        raise MalformedCIError(f"lower bound {lower} exceeds upper bound {upper}")
    return point, lower, upper


@dataclass(frozen=True)
class ShiftedEstimate:
    """A point estimate and 95% CI after removing a hypothesized gap."""

    estimate: float
    lower: float
    upper: float
    gap: float


def shift_estimate(estimate, gap, ci=None) -> ShiftedEstimate:
    """Subtract a causal gap from the estimate and both CI bounds."""
    point, lower, upper = _as_interval(estimate, ci)
    gap = float(gap)
    if not math.isfinite(gap):
        raise InputError("gap is not finite")
    return ShiftedEstimate(
        estimate=point - gap, lower=lower - gap, upper=upper - gap, gap=gap
    )


def compute_g_value(estimate, ci=None) -> float:
    """Minimal |gap| negating the finding; equals min(|lower|, |upper|).

    A finding here is the null status of the 95% CI.  Negation means the
    shifted interval's nearer bound reaches 0 (positive finding) or crosses
    it (null finding); the minimal such |gap| is the distance from 0 to the
    nearer bound in either case.
    """
    _, lower, upper = _as_interval(estimate, ci)
    return min(abs(lower), abs(upper))


@dataclass(frozen=True)
class SensitivityCurve:
    """Shifted estimates over a gap grid, with unit conversions and G-value.

    ``gap_delta_units`` (gap / SD of the outcome) and ``gap_adj_units``
    (gap / |unadjusted - adjusted|) are None when the corresponding
    denominator was unavailable.
    """

    estimate: float
    lower: float
    upper: float
    gaps: np.ndarray
    shifted_estimate: np.ndarray
    shifted_lower: np.ndarray
    shifted_upper: np.ndarray
    g_value: float
    gap_delta_units: np.ndarray | None = None
    gap_adj_units: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.gaps)

    def to_csv(self) -> str:
        columns = [("gap", self.gaps)]
        if self.gap_delta_units is not None:
            columns.append(("gap_delta_units", self.gap_delta_units))
        if self.gap_adj_units is not None:
            columns.append(("gap_adj_units", self.gap_adj_units))
        columns += [
            ("shifted_estimate", self.shifted_estimate),
            ("shifted_lower", self.shifted_lower),
            ("shifted_upper", self.shifted_upper),
        ]
        lines = [",".join(name for name, _ in columns)]
        for i in range(len(self.gaps)):
            lines.append(",".join(repr(float(col[i])) for _, col in columns))
        return "\n".join(lines) + "\n"


def _unit_column(gaps, denominator, label):
    if denominator is None:
        return None
    denominator = float(denominator)
    if not math.isfinite(denominator) or denominator <= 0.0:
        warnings.warn(
            f"{label} denominator is not positive; column omitted", UserWarning
        )
        return None
    return gaps / denominator


def sensitivity_curve(
    estimate,
    gap_min: float,
    gap_max: float,
    steps: int,
    adjusted_vs_unadjusted_gap=None,
    sd_outcome=None,
    ci=None,
) -> SensitivityCurve:
    """Tabulate shifted estimates over an even gap grid.

    The grid always runs from ``gap_min`` to ``gap_max`` inclusive.  Unit
    columns rescale each gap by a caller-supplied denominator: the outcome
    standard deviation for effect-size units, and the absolute difference
    between unadjusted and adjusted estimates for adjustment units.  A
    missing or non-positive denominator drops that column (with a warning
    when non-positive) rather than failing the whole curve.
    """
    point, lower, upper = _as_interval(estimate, ci)
    gap_min = float(gap_min)
    gap_max = float(gap_max)
    if not (math.isfinite(gap_min) and math.isfinite(gap_max)):
        raise InputError("gap bounds must be finite")
    if gap_min >= gap_max:
        raise InputError("gap_min must be strictly below gap_max")
    steps = int(steps)
    if steps < 2:
        raise InputError("need at least 2 grid steps")
    gaps = np.linspace(gap_min, gap_max, steps)
    return SensitivityCurve(
        estimate=point,
        lower=lower,
        upper=upper,
        gaps=gaps,
        shifted_estimate=point - gaps,
        shifted_lower=lower - gaps,
        shifted_upper=upper - gaps,
        g_value=min(abs(lower), abs(upper)),
        gap_delta_units=_unit_column(gaps, sd_outcome, "effect-size unit"),
        gap_adj_units=_unit_column(gaps, adjusted_vs_unadjusted_gap, "adjustment unit"),
    )
