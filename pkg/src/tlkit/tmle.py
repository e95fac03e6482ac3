"""Targeted estimation of the marginal risk difference.

The estimator follows the standard recipe: an initial outcome regression
(cross-validated Lasso with treatment forced in), a logistic fluctuation
along the two-sided clever covariate with the initial fit as offset, and the
influence-curve variance.  All reductions over subjects use exactly rounded
summation, so estimates are bit-identical under row permutation of the
inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logit

from .errors import (
    AlignmentError,
    ConvergenceError,
    DegenerateOutcomeError,
    EmptyCohortError,
    InputError,
)
from .glm import (
    bounded_expit,
    default_penalty_spec,
    fit_logistic,
    fit_penalized_cv,
)

Q_BOUNDS = (1e-4, 1.0 - 1e-4)
Z_95 = 1.96  # conventional two-sided 95% multiplier

TREATMENT_COLUMN = "treatment"


def _fsum(values: np.ndarray) -> float:
    return math.fsum(values.tolist())


@dataclass(frozen=True)
class CleverCovariate:
    """Per-subject clever covariate under observed A and both arms."""

    h_obs: np.ndarray
    h1: np.ndarray
    h0: np.ndarray


def clever_covariate(a, g) -> CleverCovariate:
    """H = A/g - (1-A)/(1-g), with the counterfactual-arm versions kept."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if a.shape != g.shape:
        raise AlignmentError("A and g have different lengths")
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise InputError("g must lie strictly inside (0, 1); truncate first")
    h1 = 1.0 / g
    h0 = -1.0 / (1.0 - g)
    return CleverCovariate(h_obs=np.where(a == 1.0, h1, h0), h1=h1, h0=h0)


@dataclass(frozen=True)
class OutcomeFit:
    """Initial (or fluctuated) outcome regression predictions.

    Three probability columns per subject: under the observed treatment,
    under A = 1, and under A = 0.  The observed column always equals the
    matching counterfactual column.
    """

    q_obs: np.ndarray
    q1: np.ndarray
    q0: np.ndarray
    lambda_selected: float | None = None
    treatment_forced: bool = True
    epsilon: float = 0.0

    def validate(self, a=None) -> None:
        for name, col in (("q_obs", self.q_obs), ("q1", self.q1), ("q0", self.q0)):
            if np.any(col <= 0.0) or np.any(col >= 1.0):
                raise InputError(f"{name} must lie strictly inside (0, 1)")
        if not (len(self.q_obs) == len(self.q1) == len(self.q0)):
            raise AlignmentError("prediction columns have different lengths")
        if a is not None:
            a = np.asarray(a)
            want = np.where(a == 1, self.q1, self.q0)
            if not np.array_equal(self.q_obs, want):
                raise AlignmentError(
                    "observed-treatment predictions disagree with the arm columns"
                )

    @property
    def n(self) -> int:
        return len(self.q_obs)


def fit_initial_outcome(
    dataset,
    catalog=None,
    seed=0,
    n_folds: int = 5,
    n_lambda: int = 100,
) -> OutcomeFit:
    """Cross-validated Lasso of Y on (A, W) with treatment left unpenalized.

    Expects a dataset already restricted to observed outcomes.  Predictions
    are bounded into [1e-4, 1 - 1e-4] so later logits stay finite.
    """
    if np.any(dataset.delta == 0):
        raise InputError("restrict to observed outcomes before fitting")
    y = dataset.y.astype(np.float64)
    if y.sum() == 0:
        raise DegenerateOutcomeError("no events in the analysis set")
    if y.sum() == len(y):
        raise DegenerateOutcomeError("every subject has the event")
    names = catalog.retained_names() if catalog is not None else dataset.feature_names
    W = dataset.feature_matrix(names)
    a = dataset.a.astype(np.float64)
    X = np.column_stack([a, W])
    weights = np.ones(X.shape[1])
    weights[0] = 0.0  # treatment is never shrunk
    spec = default_penalty_spec(X, y, weights, n_lambda=n_lambda)
    path = fit_penalized_cv(
        X, y, spec, n_folds, seed, feature_names=[TREATMENT_COLUMN] + list(names)
    )
    k = path.selected_index
    coef = path.coefficients[k]
    icept = path.intercepts[k]
    eta_w = W @ coef[1:] + icept
    lo, hi = Q_BOUNDS
    q1 = np.clip(bounded_expit(eta_w + coef[0]), lo, hi)
    q0 = np.clip(bounded_expit(eta_w), lo, hi)
    return OutcomeFit(
        q_obs=np.where(a == 1.0, q1, q0),
        q1=q1,
        q0=q0,
        lambda_selected=float(path.lambda_grid[k]),
        treatment_forced=True,
    )


def fluctuation_epsilon(h_obs, y, q_obs, tol: float = 1e-9) -> tuple[float, bool]:
    """One-parameter logistic fluctuation coefficient (no intercept).

    Fits Y ~ H with offset logit(q_obs).  Returns (epsilon, converged).
    Exactly rounded score sums make the result permutation-invariant.
    """
    offset = logit(np.asarray(q_obs, dtype=np.float64))
    fit = fit_logistic(
        np.asarray(h_obs, dtype=np.float64).reshape(-1, 1),
        np.asarray(y, dtype=np.float64),
        offset=offset,
        intercept=False,
        tol=tol,
    )
    return float(fit.coefficients[0]), fit.converged


def fluctuate(outcome_fit: OutcomeFit, h: CleverCovariate, y) -> tuple[OutcomeFit, float]:
    """Target the outcome fit along the clever covariate.

    Updates all three prediction columns by epsilon * H(a, g) on the logit
    scale.  After the update the efficient-score equation holds to 1e-8.
    """
    y = np.asarray(y, dtype=np.float64)
    if len(y) != outcome_fit.n or len(h.h_obs) != outcome_fit.n:
        raise AlignmentError("outcome fit, clever covariate, and Y must align")
    eps, converged = fluctuation_epsilon(h.h_obs, y, outcome_fit.q_obs)
    if not converged:
        resid = _fsum(h.h_obs * (y - outcome_fit.q_obs)) / len(y)
        raise ConvergenceError(
            f"fluctuation did not converge (epsilon={eps:.6g}, "
            f"initial score residual={resid:.3e})"
        )
    updated = replace(
        outcome_fit,
        q_obs=bounded_expit(logit(outcome_fit.q_obs) + eps * h.h_obs),
        q1=bounded_expit(logit(outcome_fit.q1) + eps * h.h1),
        q0=bounded_expit(logit(outcome_fit.q0) + eps * h.h0),
        epsilon=eps,
    )
    return updated, eps


@dataclass(frozen=True)
class TmleEstimate:
    """Point estimate with influence-curve inference.

    ``se`` is the population-style (denominator n) standard deviation of the
    influence curve over sqrt(n); the 95% interval is psi +- 1.96 * se.
    """

    psi: float
    epsilon: float
    influence_curve: np.ndarray
    se: float
    ci_lower: float
    ci_upper: float
    n: int
    score_residual: float
    model_label: str = ""

    def to_report(self) -> str:
        lines = [
            "risk difference estimate",
            f"  model: {self.model_label or 'unspecified'}",
            f"  n: {self.n}",
            f"  estimate: {self.psi:.6f}",
            f"  se: {self.se:.6f}",
            f"  ci95: ({self.ci_lower:.6f}, {self.ci_upper:.6f})",
            f"  epsilon: {self.epsilon:.6g}",
            f"  score_residual: {self.score_residual:.3e}",
        ]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model_label,
                "n": self.n,
                "estimate": self.psi,
                "se": self.se,
                "ci_lower": self.ci_lower,
                "ci_upper": self.ci_upper,
                "epsilon": self.epsilon,
                "score_residual": self.score_residual,
            },
            indent=2,
            sort_keys=True,
        )


def _ic_inference(psi, ic, epsilon, score_residual, n, label) -> TmleEstimate:
    mean_ic = _fsum(ic) / n
    var = _fsum((ic - mean_ic) ** 2) / n
    se = math.sqrt(var / n)
    return TmleEstimate(
        psi=psi,
        epsilon=epsilon,
        influence_curve=ic,
        se=se,
        ci_lower=psi - Z_95 * se,
        ci_upper=psi + Z_95 * se,
        n=n,
        score_residual=score_residual,
        model_label=label,
    )


def estimate_ate(dataset, ps, outcome_fit: OutcomeFit, model_label=None) -> TmleEstimate:
    """TMLE of E[Y(1)] - E[Y(0)] given a propensity fit and the initial Q.

    ``ps`` may be a propensity fit result (anything with a ``g`` attribute)
    or a plain truncated probability array.
    """
    g = np.asarray(getattr(ps, "g", ps), dtype=np.float64)
    if model_label is None:
        model = getattr(ps, "model", None)
        model_label = str(model) if model is not None else ""
    y = dataset.y.astype(np.float64)
    a = dataset.a.astype(np.float64)
    n = dataset.n
    if np.any(dataset.delta == 0):
        raise InputError("restrict to observed outcomes before estimation")
    if len(g) != n or outcome_fit.n != n:
        raise AlignmentError(
            f"components disagree on n: dataset {n}, g {len(g)}, "
            f"outcome fit {outcome_fit.n}"
        )
    outcome_fit.validate(a=a)
    h = clever_covariate(a, g)
    targeted, eps = fluctuate(outcome_fit, h, y)
    psi = _fsum(targeted.q1 - targeted.q0) / n
    score = _fsum(h.h_obs * (y - targeted.q_obs)) / n
    ic = h.h_obs * (y - targeted.q_obs) + targeted.q1 - targeted.q0 - psi
    return _ic_inference(psi, ic, eps, score, n, model_label)


def unadjusted_rd(dataset) -> TmleEstimate:
    """Difference in arm event proportions with the exact Wald interval.

    The influence-curve form reproduces sqrt(p1*q1/n1 + p0*q0/n0) exactly,
    so the same inference code serves both estimators.
    """
    if np.any(dataset.delta == 0):
        raise InputError("restrict to observed outcomes before estimation")
    y = dataset.y.astype(np.float64)
    a = dataset.a.astype(np.float64)
    n = dataset.n
    n1 = int(a.sum())
    n0 = n - n1
    if n1 == 0 or n0 == 0:
        raise EmptyCohortError("both treatment arms must be non-empty")
    p1 = _fsum(a * y) / n1
    p0 = _fsum((1.0 - a) * y) / n0
    psi = p1 - p0
    pi1 = n1 / n
    pi0 = n0 / n
    ic = a * (y - p1) / pi1 - (1.0 - a) * (y - p0) / pi0
    return _ic_inference(psi, ic, 0.0, 0.0, n, "unadjusted")


def rd_from_counts(
    events_treated: int,
    n_treated: int,
    events_control: int,
    n_control: int,
) -> TmleEstimate:
    """Unadjusted risk difference from 2x2 margins supplied as counts.

    Expands the margins to subject-level arrays and reuses the
    influence-curve inference, so the result matches ``unadjusted_rd`` on
    the equivalent dataset bit for bit.
    """
    counts = {
        "events_treated": events_treated,
        "n_treated": n_treated,
        "events_control": events_control,
        "n_control": n_control,
    }
    for name, value in counts.items():
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise InputError(f"{name} must be an integer count, got {value!r}")
        if value < 0:
            raise InputError(f"{name} must be non-negative, got {value}")
    if events_treated > n_treated or events_control > n_control:
        raise InputError("event counts cannot exceed arm sizes")
    if n_treated == 0 or n_control == 0:
        raise EmptyCohortError("both treatment arms must be non-empty")
    a = np.repeat([1.0, 0.0], [n_treated, n_control])
    y = np.concatenate(
        [
            np.repeat([1.0, 0.0], [events_treated, n_treated - events_treated]),
            np.repeat([1.0, 0.0], [events_control, n_control - events_control]),
        ]
    )
    n = n_treated + n_control
    p1 = events_treated / n_treated
    p0 = events_control / n_control
    pi1 = n_treated / n
    pi0 = n_control / n
    ic = a * (y - p1) / pi1 - (1.0 - a) * (y - p0) / pi0
    return _ic_inference(p1 - p0, ic, 0.0, 0.0, n, "unadjusted")
