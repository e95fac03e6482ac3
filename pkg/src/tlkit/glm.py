"""Penalized and unpenalized logistic regression.

This is the shared computational substrate: plain maximum-likelihood fits
(with offsets, used by the targeting step), weighted-penalty Lasso /
elastic-net paths with warm starts, and cross-validated penalty selection.
Coefficients are always reported on the original feature scale; penalized
solves standardize internally and record the constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from ._cd import cd_logistic_path
from .errors import (
    AlignmentError,
    DegenerateFitError,
    FoldError,
    InputError,
    SpecError,
)
from .folds import check_train_classes, stratified_folds

# linear predictors are clipped here before expit so probabilities stay in (0,1)
ETA_BOUND = 30.0

KKT_TOL = 1e-8  # internal target; the contract tolerance is 1e-6


def bounded_expit(eta: np.ndarray) -> np.ndarray:
    """Inverse logit with the linear predictor clipped to +-ETA_BOUND."""
    return expit(np.clip(eta, -ETA_BOUND, ETA_BOUND))


def binomial_deviance(y: np.ndarray, p: np.ndarray) -> float:
    """Mean binomial deviance -2/n * loglik at probabilities ``p``."""
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-2.0 * np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


@dataclass
class GlmFit:
    """An unpenalized logistic fit."""

    coefficients: np.ndarray
    intercept: float
    feature_names: list[str]
    converged: bool
    n_iter: int
    offset_used: bool = False

    def linear_predictor(self, X: np.ndarray, offset=None) -> np.ndarray:
        eta = X @ self.coefficients + self.intercept
        if offset is not None:
            eta = eta + offset
        return eta

    def to_json(self) -> str:
        doc = {
            "kind": "glm_fit",
            "intercept": self.intercept,
            "coefficients": dict(zip(self.feature_names, map(float, self.coefficients))),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "offset_used": self.offset_used,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GlmFit":
        doc = json.loads(text)
        names = sorted(doc["coefficients"])
        return cls(
            coefficients=np.array([doc["coefficients"][k] for k in names]),
            intercept=doc["intercept"],
            feature_names=names,
            converged=doc["converged"],
            n_iter=doc["n_iter"],
            offset_used=doc["offset_used"],
        )


@dataclass
class PenaltySpec:
    """Penalty-path specification: grid, per-feature weights, elastic-net mixing.

    ``lambda_grid`` must be strictly descending and positive; a weight of 0
    forces the feature in unpenalized.  ``alpha`` = 1 is the pure Lasso.
    """

    lambda_grid: np.ndarray
    penalty_weights: np.ndarray
    alpha: float = 1.0

    def validate(self, n_features: int | None = None) -> None:
        grid = np.asarray(self.lambda_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise SpecError("lambda grid must be a nonempty 1-d sequence")
        if np.any(grid <= 0) or not np.all(np.isfinite(grid)):
            raise SpecError("lambda grid values must be positive and finite")
        if grid.size > 1 and np.any(np.diff(grid) >= 0):
            raise SpecError("lambda grid must be strictly descending (no duplicates)")
        w = np.asarray(self.penalty_weights, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise SpecError("penalty weights must be nonnegative and finite")
        if n_features is not None and w.shape[0] != n_features:
            raise SpecError(
                f"penalty weights length {w.shape[0]} != number of features {n_features}"
            )
        if not (0.0 <= self.alpha <= 1.0):
            raise SpecError("alpha must lie in [0, 1]")


@dataclass
class RegularizedFitPath:
    """Solutions along a penalty grid, plus optional cross-validation results.

    ``coefficients[k]`` is the original-scale coefficient vector at
    ``lambda_grid[k]``; standardization constants are kept so the penalized
    stationarity conditions can be re-checked externally.
    """

    feature_names: list[str]
    lambda_grid: np.ndarray
    alpha: float
    penalty_weights: np.ndarray
    coefficients: np.ndarray  # (L, p) original scale
    intercepts: np.ndarray  # (L,)
    kkt_residuals: np.ndarray
    converged: np.ndarray
    feature_means: np.ndarray
    feature_scales: np.ndarray
    cv_deviance: np.ndarray | None = None
    cv_folds: int | None = None
    selected_index: int | None = None

    @property
    def n_lambda(self) -> int:
        return int(self.lambda_grid.shape[0])

    def element(self, index: int) -> GlmFit:
        """View one grid point as a plain fit (original scale)."""
        return GlmFit(
            coefficients=self.coefficients[index].copy(),
            intercept=float(self.intercepts[index]),
            feature_names=list(self.feature_names),
            converged=bool(self.converged[index]),
            n_iter=0,
        )

    @property
    def selected(self) -> GlmFit:
        if self.selected_index is None:
            raise SpecError("no penalty level has been selected for this path")
        return self.element(self.selected_index)

    def active_set(self, index: int, tol: float = 0.0) -> list[str]:
        coef = self.coefficients[index]
        return [n for n, c in zip(self.feature_names, coef) if abs(c) > tol]

    def element_to_json(self, index: int) -> str:
        doc = {
            "kind": "penalized_fit",
            "lambda": float(self.lambda_grid[index]),
            "alpha": self.alpha,
            "intercept": float(self.intercepts[index]),
            "coefficients": dict(
                zip(self.feature_names, map(float, self.coefficients[index]))
            ),
            "penalty_weights": dict(
                zip(self.feature_names, map(float, self.penalty_weights))
            ),
            "standardization": {
                name: {"mean": float(m), "scale": float(s)}
                for name, m, s in zip(
                    self.feature_names, self.feature_means, self.feature_scales
                )
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    vals = np.unique(y)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise InputError(f"response must be binary 0/1, found values {vals[:5]}")
    return y


def _loglik(y, eta, wt) -> float:
    # = sum wt * [y*eta - log(1+exp(eta))], stable for large |eta|
    val = y * eta - np.logaddexp(0.0, eta)
    return float(np.sum(wt * val))


def _fsum_mean(values) -> float:
    return math.fsum(values) / len(values)


def _strictly_separates(scores: np.ndarray, y: np.ndarray, wt: np.ndarray) -> bool:
    """Certificate that the fitted direction perfectly separates the classes.

    If min(scores | y=1) > max(scores | y=0) the likelihood increases without
    bound along this direction, so no maximum-likelihood solution exists and
    the fit must be flagged even though the saturated gradient looks converged.
    """
    live = wt > 0
    s1 = scores[live & (y == 1.0)]
    s0 = scores[live & (y == 0.0)]
    if s1.size == 0 or s0.size == 0:
        return False
    if np.ptp(scores[live]) == 0.0:
        return False  # constant direction cannot separate anything
    return float(s1.min()) > float(s0.max())


def _fit_single_parameter(x, y, offset, wt, tol, max_iter, step_cap):
    """Newton solve for one coefficient with exactly rounded reductions.

    Exact (fsum) summation makes the result invariant to row permutations,
    which downstream estimate reductions rely on.
    """
    n = y.shape[0]
    wtot = math.fsum(wt)
    theta = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = offset + theta * x
        p = bounded_expit(eta)
        g = math.fsum((wt * x * (y - p)).tolist()) / wtot
        if abs(g) <= tol:
            converged = True
            break
        curv = math.fsum((wt * x * x * p * (1.0 - p)).tolist()) / wtot
        if curv < 1e-12:
            curv = 1e-12
        step = g / curv
        if step > step_cap:
            step = step_cap
        elif step < -step_cap:
            step = -step_cap
        theta += step
    return theta, converged, it


def fit_logistic(
    X,
    y,
    offset=None,
    weights=None,
    feature_names=None,
    intercept: bool = True,
    tol: float = 1e-8,
    max_iter: int = 100,
    step_cap: float = 10.0,
) -> GlmFit:
    """Maximum-likelihood logistic regression via damped Newton iterations.

    Convergence means the weighted mean score has max-norm at most ``tol``.
    Separated data cannot converge; the fit is returned with bounded
    coefficients (each Newton step is capped at euclidean norm ``step_cap``)
    and ``converged=False``.

    Raises
    ------
    DegenerateFitError
        if the response is single-class and no offset is supplied.
    InputError
        for non-finite inputs or length mismatches.
    """
    X = _as_matrix(X) if X is not None else np.empty((len(y), 0))
    y = _check_binary(y)
    n, p = X.shape
    if n != y.shape[0]:
        raise InputError(f"X has {n} rows but y has {y.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise InputError("X contains non-finite values")
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(p)]
    if offset is not None:
        offset = np.asarray(offset, dtype=np.float64).ravel()
        if offset.shape[0] != n:
            raise InputError("offset length mismatch")
    if weights is None:
        wt = np.ones(n)
    else:
        wt = np.asarray(weights, dtype=np.float64).ravel()
        if np.any(wt < 0):
            raise InputError("observation weights must be nonnegative")
    live = wt > 0
    if offset is None and y[live].size and (y[live].min() == y[live].max()):
        raise DegenerateFitError(
            "response takes a single value and no offset is supplied"
        )

    off = offset if offset is not None else np.zeros(n)
    n_params = p + int(intercept)
    if n_params == 0:
        return GlmFit(np.empty(0), 0.0, [], True, 0, offset_used=offset is not None)

    if n_params == 1:
        x_col = np.ones(n) if intercept else X[:, 0]
        theta, converged, it = _fit_single_parameter(
            x_col, y, off, wt, tol, max_iter, step_cap
        )
        if converged and _strictly_separates(np.sign(theta) * x_col, y, wt):
            converged = False
        if intercept:
            return GlmFit(np.empty(0), theta, [], converged, it, offset is not None)
        return GlmFit(
            np.array([theta]), 0.0, list(feature_names), converged, it, offset is not None
        )

    D = np.column_stack([np.ones(n), X]) if intercept else X
    theta = np.zeros(D.shape[1])
    wtot = wt.sum()
    converged = False
    it = 0
    eta = D @ theta + off
    ll = _loglik(y, eta, wt)
    for it in range(1, max_iter + 1):
        pr = bounded_expit(eta)
        g = D.T @ (wt * (y - pr)) / wtot
        if np.max(np.abs(g)) <= tol:
            converged = True
            break
        w_irls = wt * pr * (1.0 - pr)
        H = (D * w_irls[:, None]).T @ D / wtot
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(H, g, rcond=None)[0]
        norm = float(np.linalg.norm(delta))
        if norm > step_cap:
            delta *= step_cap / norm
        # backtrack on likelihood decreases (deterministic halving)
        scale = 1.0
        for _ in range(30):
            eta_new = D @ (theta + scale * delta) + off
            ll_new = _loglik(y, eta_new, wt)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        theta = theta + scale * delta
        eta = D @ theta + off
        ll = _loglik(y, eta, wt)
    if converged and _strictly_separates(D @ theta, y, wt):
        converged = False
    if intercept:
        return GlmFit(theta[1:], float(theta[0]), list(feature_names), converged, it, offset is not None)
    return GlmFit(theta, 0.0, list(feature_names), converged, it, offset is not None)


def _standardize(X: np.ndarray):
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    return (X - means) / scales, means, scales


def lambda_max(X, y, penalty_weights, alpha: float = 1.0) -> float:
    """Smallest penalty level at which every penalized coefficient is zero.

    Computed at the null model (intercept plus any forced-in features fit
    unpenalized): max over penalized j of |x_j'(y - p0)| / (n * alpha * w_j)
    on the standardized scale, nudged up by a relative 1e-10 so the first
    grid point is exactly sparse.
    """
    X = _as_matrix(X)
    y = _check_binary(y)
    w = np.asarray(penalty_weights, dtype=float)
    Xs, _, _ = _standardize(X)
    forced = w == 0
    if forced.any():
        null_fit = fit_logistic(Xs[:, forced], y)
        p0 = bounded_expit(null_fit.linear_predictor(Xs[:, forced]))
    else:
        p0 = np.full(y.shape[0], y.mean())
    c = np.abs(Xs.T @ (y - p0)) / y.shape[0]
    pen = ~forced
    if not pen.any():
        return 1.0
    a = max(alpha, 1e-3)  # ridge-like mixes still need a finite entry point
    lm = float(np.max(c[pen] / (a * w[pen])))
    if lm <= 0:
        lm = 1e-3
    return lm * (1.0 + 1e-10)


def default_penalty_spec(
    X,
    y,
    penalty_weights=None,
    alpha: float = 1.0,
    n_lambda: int = 100,
    min_ratio: float | None = None,
) -> PenaltySpec:
    """Log-spaced grid from lambda_max down to min_ratio * lambda_max.

    When ``min_ratio`` is not given it depends on the data: 1e-4 when the
    minority class count exceeds the feature count, else 1e-2.  A logistic
    fit's effective sample size is the minority class count, so descending
    to 1e-4 * lambda_max past that point only manufactures separated fits.
    """
    X = _as_matrix(X)
    if penalty_weights is None:
        penalty_weights = np.ones(X.shape[1])
    penalty_weights = np.asarray(penalty_weights, dtype=float)
    if min_ratio is None:
        y_arr = np.asarray(y, dtype=np.float64)
        minority = min(float(np.sum(y_arr)), float(np.sum(1.0 - y_arr)))
        min_ratio = 1e-4 if minority > X.shape[1] else 1e-2
    lmax = lambda_max(X, y, penalty_weights, alpha)
    grid = np.geomspace(lmax, lmax * min_ratio, n_lambda)
    return PenaltySpec(grid, penalty_weights, alpha)


def fit_penalized_path(X, y, spec: PenaltySpec, feature_names=None) -> RegularizedFitPath:
    """Fit the weighted elastic-net logistic path down ``spec.lambda_grid``.

    Features are standardized internally (constants recorded on the result);
    forced-in features (weight 0) are refit unpenalized at every grid point.
    Stationarity of each solution is driven to 1e-8 on the exact gradient.
    """
    X = _as_matrix(X)
    y = _check_binary(y)
    if X.shape[0] != y.shape[0]:
        raise InputError("X and y have different lengths")
    if not np.all(np.isfinite(X)):
        raise InputError("X contains non-finite values")
    spec.validate(n_features=X.shape[1])
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(X.shape[1])]
    elif len(feature_names) != X.shape[1]:
        raise InputError("feature_names length mismatch")

    Xs, means, scales = _standardize(X)
    Xs = np.asfortranarray(Xs)
    pen_w = np.asarray(spec.penalty_weights, dtype=np.float64)
    grid = np.asarray(spec.lambda_grid, dtype=np.float64)

    # warm start at the null model so the sparse end of the path is exact
    forced = pen_w == 0
    init_beta = np.zeros(X.shape[1])
    if forced.any():
        null_fit = fit_logistic(Xs[:, forced], y)
        init_beta[forced] = null_fit.coefficients
        init_b0 = null_fit.intercept
    else:
        ybar = y.mean()
        init_b0 = float(logit(ybar)) if 0.0 < ybar < 1.0 else 0.0

    coefs_std, icepts_std, kkts, conv, _ = cd_logistic_path(
        Xs,
        y,
        grid,
        pen_w,
        float(spec.alpha),
        init_b0,
        init_beta,
        100,  # max outer (IRLS) iterations per grid point
        2000,  # max CD sweeps per quadratic
        KKT_TOL,
        1e-11,
    )
    coefs = coefs_std / scales[None, :]
    icepts = icepts_std - coefs_std @ (means / scales)
    return RegularizedFitPath(
        feature_names=list(feature_names),
        lambda_grid=grid,
        alpha=float(spec.alpha),
        penalty_weights=pen_w,
        coefficients=coefs,
        intercepts=icepts,
        kkt_residuals=kkts,
        converged=conv,
        feature_means=means,
        feature_scales=scales,
    )


def kkt_residual(path: RegularizedFitPath, X, y, index: int) -> float:
    """Recompute the stationarity residual of one grid point from raw data.

    Uses the recorded standardization constants, so it checks the actual
    optimality conditions the solver targeted.
    """
    X = _as_matrix(X)
    y = _check_binary(y)
    Xs = (X - path.feature_means) / path.feature_scales
    beta_std = path.coefficients[index] * path.feature_scales
    b0_std = path.intercepts[index] + path.coefficients[index] @ path.feature_means
    p = bounded_expit(Xs @ beta_std + b0_std)
    n = y.shape[0]
    c = Xs.T @ (y - p) / n
    lam = float(path.lambda_grid[index])
    alpha = path.alpha
    w = path.penalty_weights
    resid = abs(float(np.mean(y - p)))
    for j in range(Xs.shape[1]):
        if w[j] == 0.0:
            r = abs(c[j])
        elif beta_std[j] == 0.0:
            r = max(0.0, abs(c[j]) - lam * alpha * w[j])
        else:
            r = abs(
                c[j]
                - lam * w[j] * (alpha * np.sign(beta_std[j]) + (1 - alpha) * beta_std[j])
            )
        resid = max(resid, r)
    return resid


def penalized_objective(path: RegularizedFitPath, X, y, index: int) -> float:
    """Value of the penalized objective (standardized scale) at one grid point."""
    X = _as_matrix(X)
    y = _check_binary(y)
    Xs = (X - path.feature_means) / path.feature_scales
    beta_std = path.coefficients[index] * path.feature_scales
    b0_std = path.intercepts[index] + path.coefficients[index] @ path.feature_means
    eta = Xs @ beta_std + b0_std
    nll = -_loglik(y, eta, np.ones(y.shape[0])) / y.shape[0]
    lam = float(path.lambda_grid[index])
    w = path.penalty_weights
    pen = lam * np.sum(
        w * (path.alpha * np.abs(beta_std) + 0.5 * (1 - path.alpha) * beta_std**2)
    )
    return nll + float(pen)


def predict_probabilities(fit, X_new, feature_names=None, offset=None) -> np.ndarray:
    """Predicted probabilities for new rows, reconciled to the fit by name.

    ``feature_names`` labels the columns of ``X_new``; any column order is
    accepted and extra columns are ignored.  A feature the fit requires but
    ``X_new`` lacks raises AlignmentError.
    """
    X_new = _as_matrix(X_new)
    fit_names = list(fit.feature_names)
    if feature_names is None:
        if X_new.shape[1] != len(fit_names):
            raise AlignmentError(
                "X_new has no column names and its width does not match the fit"
            )
        aligned = X_new
    else:
        pos = {name: k for k, name in enumerate(feature_names)}
        missing = [name for name in fit_names if name not in pos]
        if missing:
            raise AlignmentError(f"X_new is missing fit features: {missing[:5]}")
        aligned = X_new[:, [pos[name] for name in fit_names]]
    coef = np.asarray(fit.coefficients, dtype=float)
    eta = aligned @ coef + fit.intercept
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    return bounded_expit(eta)


@dataclass
class CvCurve:
    """Out-of-fold deviance per grid point and the selected index."""

    deviance: np.ndarray
    selected_index: int
    n_folds: int
    fold_ids: np.ndarray = field(repr=False, default=None)


def cv_select_lambda(X, y, spec: PenaltySpec, n_folds: int, seed) -> CvCurve:
    """Select the penalty level minimizing pooled out-of-fold binomial deviance.

    Folds are stratified on ``y`` and deterministic given ``seed``.  Ties are
    broken toward the larger (sparser) penalty.
    """
    X = _as_matrix(X)
    y = _check_binary(y)
    spec.validate(n_features=X.shape[1])
    if n_folds < 2:
        raise FoldError(f"cross-validation needs at least 2 folds, got {n_folds}")
    fold_ids = stratified_folds(y, n_folds, seed)
    check_train_classes(y, fold_ids, n_folds)
    L = len(spec.lambda_grid)
    oof = np.empty((y.shape[0], L))
    for v in range(n_folds):
        tr = fold_ids != v
        te = ~tr
        path = fit_penalized_path(X[tr], y[tr], spec)
        eta = X[te] @ path.coefficients.T + path.intercepts[None, :]
        oof[te, :] = bounded_expit(eta)
    pc = np.clip(oof, 1e-12, 1 - 1e-12)
    dev = -2.0 * np.mean(
        y[:, None] * np.log(pc) + (1 - y[:, None]) * np.log1p(-pc), axis=0
    )
    # first minimum = largest lambda among ties (grid is descending)
    selected = int(np.argmin(dev))
    return CvCurve(deviance=dev, selected_index=selected, n_folds=n_folds, fold_ids=fold_ids)


def fit_penalized_cv(
    X, y, spec: PenaltySpec, n_folds: int, seed, feature_names=None
) -> RegularizedFitPath:
    """Full-data path plus cross-validated penalty selection, in one object."""
    curve = cv_select_lambda(X, y, spec, n_folds, seed)
    path = fit_penalized_path(X, y, spec, feature_names=feature_names)
    path.cv_deviance = curve.deviance
    path.cv_folds = n_folds
    path.selected_index = curve.selected_index
    return path
