"""Propensity-score models 1 through 8.

Four Lasso variants for the treatment model, each available plain or
cross-fitted:

  1  traditional: penalty level chosen by cross-validated prediction of A
  2  outcome-adaptive: features predictive of Y are forced in unpenalized
  3  collaborative-controlled: penalty level chosen by cross-validated
     targeted loss of the fluctuated outcome model
  4  both modifications together
  5-8  the same four with out-of-fold (cross-fit) propensity scores
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from .errors import DegenerateOutcomeError, FoldError, InputError, SpecError
from .folds import stratified_folds
from .glm import (
    PenaltySpec,
    bounded_expit,
    default_penalty_spec,
    fit_penalized_cv,
    fit_penalized_path,
)
from .tmle import OutcomeFit, fit_initial_outcome, fluctuation_epsilon

METHODS = (
    "traditional-lasso",
    "outcome-adaptive-lasso",
    "collaborative-controlled-lasso",
    "collaborative-controlled-outcome-adaptive-lasso",
)


@dataclass(frozen=True)
class PsModelId:
    """One of the eight propensity model variants."""

    method: str
    cross_fit: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecError(f"unknown method {self.method!r}; choose from {METHODS}")

    @property
    def model_number(self) -> int:
        return 1 + METHODS.index(self.method) + (4 if self.cross_fit else 0)

    @classmethod
    def from_number(cls, number) -> "PsModelId":
        number = int(number)
        if not 1 <= number <= 8:
            raise SpecError(f"model number must be 1..8, got {number}")
        return cls(method=METHODS[(number - 1) % 4], cross_fit=number > 4)

    @property
    def uses_forced_set(self) -> bool:
        return METHODS.index(self.method) % 2 == 1

    @property
    def uses_collaborative(self) -> bool:
        return METHODS.index(self.method) >= 2

    def __str__(self) -> str:
        suffix = ", cross-fit" if self.cross_fit else ""
        return f"M{self.model_number} ({self.method}{suffix})"


@dataclass
class PsConfig:
    """Knobs shared by all eight models.

    n_folds drives both penalty-selection CV and cross-fitting.  An explicit
    lambda_grid overrides the data-driven default (descending, positive).
    """

    n_folds: int = 5
    truncation: tuple[float, float] = (0.01, 0.99)
    n_lambda: int = 100
    lambda_grid: np.ndarray | None = None
    alpha: float = 1.0
    collaborative_patience: int = 5
    collaborative_full_grid: bool = False

    def validate(self) -> None:
        lo, hi = self.truncation
        if not (0.0 < lo < hi < 1.0):
            raise SpecError(
                f"truncation bounds must satisfy 0 < lo < hi < 1, got {self.truncation}")
        if self.n_folds < 2:
            raise SpecError("n_folds must be at least 2")
        if self.n_lambda < 1:
            raise SpecError("n_lambda must be positive")
        if self.collaborative_patience < 1:
            raise SpecError("collaborative_patience must be positive")


@dataclass
class PsFitResult:
    """Truncated per-subject propensity scores plus fitting provenance.

    lambda_selected is the single selected penalty (models 1-4, 7, 8);
    cross-fit models with per-fold selection (5, 6) record fold_lambdas
    instead.  collaborative_scores holds the targeted-loss curve where it
    was evaluated; NaN marks grid points the early stop never visited.
    """

    g: np.ndarray
    model: PsModelId
    lambda_selected: float | None
    forced_features: tuple[str, ...]
    truncation_bounds: tuple[float, float]
    n_truncated: int
    fold_ids: np.ndarray | None = None
    fold_lambdas: tuple[float, ...] | None = None
    collaborative_scores: np.ndarray | None = field(default=None, repr=False)

    def to_report(self) -> str:
        lines = [
            "propensity fit report",
            f"  model: {self.model}",
        ]
        if self.lambda_selected is not None:
            lines.append(f"  lambda: {self.lambda_selected:.6g}")
        if self.fold_lambdas is not None:
            folds = ", ".join(f"{v:.6g}" for v in self.fold_lambdas)
            lines.append(f"  per-fold lambdas: {folds}")
        lines.append(
            f"  forced features ({len(self.forced_features)}): "
            + (", ".join(self.forced_features) or "none")
        )
        lo, hi = self.truncation_bounds
        lines.append(
            f"  truncation: bounds [{lo:g}, {hi:g}], {self.n_truncated} of "
            f"{len(self.g)} modified"
        )
        lines.append("  g histogram (20 bins):")
        counts, edges = np.histogram(self.g, bins=20, range=(0.0, 1.0))
        for k in range(20):
            lines.append(f"    [{edges[k]:.2f},{edges[k + 1]:.2f}) {counts[k]}")
        return "\n".join(lines)


def truncate_ps(g, bounds=(0.01, 0.99)) -> tuple[np.ndarray, int]:
    """Clamp propensity scores into [lo, hi]; returns (clamped, n modified)."""
    lo, hi = bounds
    if not (0.0 < lo < hi < 1.0):
        raise InputError(f"bounds must satisfy 0 < lo < hi < 1, got {bounds}")
    g = np.asarray(g, dtype=np.float64)
    clamped = np.clip(g, lo, hi)
    return clamped, int(np.sum(clamped != g))


def outcome_support_set(dataset, catalog=None, seed=0, config: PsConfig | None = None):
    """Features kept by a CV-selected Lasso of Y on W (treatment excluded).

    This is the forced-in set for the outcome-adaptive models: any feature
    whose outcome coefficient survives the Lasso is exempted from shrinkage
    in the treatment model.
    """
    config = config or PsConfig()
    names = list(catalog.retained_names() if catalog is not None else dataset.feature_names)
    W = dataset.feature_matrix(names)
    y = dataset.y.astype(np.float64)
    if y.sum() == 0:
        raise DegenerateOutcomeError("no events; cannot fit the outcome Lasso")
    spec = default_penalty_spec(W, y, alpha=config.alpha, n_lambda=config.n_lambda)
    path = fit_penalized_cv(W, y, spec, config.n_folds, seed, feature_names=names)
    return tuple(path.active_set(path.selected_index))


def _targeted_oof_nll(y, q_obs, h_obs, fold_ids, n_folds) -> float:
    """Pooled out-of-fold negative log-likelihood after per-fold fluctuation.

    Epsilon is refit on each training split against the fixed initial
    outcome fit; held-out subjects are scored at that epsilon.  A
    non-convergent fluctuation poisons the whole candidate with +inf.
    """
    off_all = logit(q_obs)
    total = 0.0
    for v in range(n_folds):
        tr = fold_ids != v
        eps, converged = fluctuation_epsilon(h_obs[tr], y[tr], q_obs[tr])
        if not converged:
            return np.inf
        te = ~tr
        p = np.clip(bounded_expit(off_all[te] + eps * h_obs[te]), 1e-12, 1.0 - 1e-12)
        total += float(-np.sum(y[te] * np.log(p) + (1.0 - y[te]) * np.log1p(-p)))
    return total


def _select_by_targeted_loss(y, a, q_obs, h_matrix, n_folds, seed, patience,
                             full_grid) -> tuple[int, np.ndarray]:
    """Walk the grid sparsest to densest minimizing cross-validated targeted loss.

    Folds are stratified on treatment, like every other fold split here.
    Stops after ``patience`` consecutive non-improvements unless full_grid.
    Returns (best index, score per grid point, NaN where never visited).
    """
    y = np.asarray(y, dtype=np.float64)
    L = h_matrix.shape[1]
    fold_ids = stratified_folds(np.asarray(a).astype(int), n_folds, seed)
    scores = np.full(L, np.nan)
    best_idx, best_score = 0, np.inf
    misses = 0
    for k in range(L):
        scores[k] = _targeted_oof_nll(y, q_obs, h_matrix[:, k], fold_ids, n_folds)
        if scores[k] < best_score:
            best_idx, best_score = k, float(scores[k])
            misses = 0
        else:
            misses += 1
            if not full_grid and misses >= patience:
                break
    return best_idx, scores


def _clever_matrix(a, g_matrix) -> np.ndarray:
    return np.where(a[:, None] == 1.0, 1.0 / g_matrix, -1.0 / (1.0 - g_matrix))


def collaborative_select_lambda(
    dataset, path, outcome_fit: OutcomeFit, config: PsConfig, seed
) -> tuple[int, np.ndarray]:
    """Targeted-loss penalty selection over a fitted treatment path.

    Each candidate penalty level implies (truncated) propensity scores and
    hence a clever covariate; the outcome fit is fluctuated per training
    fold and scored on held-out subjects.  Returns the selected grid index
    together with the score curve.
    """
    a = dataset.a.astype(np.float64)
    X = dataset.feature_matrix(list(path.feature_names))
    eta = X @ path.coefficients.T + path.intercepts[None, :]
    g_all = np.clip(bounded_expit(eta), *config.truncation)
    return _select_by_targeted_loss(
        dataset.y,
        a,
        outcome_fit.q_obs,
        _clever_matrix(a, g_all),
        config.n_folds,
        seed,
        config.collaborative_patience,
        config.collaborative_full_grid,
    )


def cross_fit_ps(dataset, n_folds, inner, seed, fold_ids=None):
    """Out-of-fold propensity scores from any per-split fitting procedure.

    ``inner(train_idx, fold_seed)`` must return ``(predict, info)`` where
    ``predict(test_idx)`` maps row indices to scores and the fit used only
    the ``train_idx`` rows, so subject i's score never depends on row i.
    ``fold_ids`` fixes the fold map explicitly; by default folds are
    stratified on treatment from ``seed``.

    Training splits with a single treatment class are the inner fitter's
    concern: the Lasso inners raise a fold error, while class-blind fitters
    (a constant mean, say) may proceed.

    Returns (g, fold_ids, per-fold info list).
    """
    a = dataset.a
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_folds, s_inner = ss.spawn(2)
    if fold_ids is None:
        fold_ids = stratified_folds(a, n_folds, s_folds)
    else:
        fold_ids = np.asarray(fold_ids)
        if fold_ids.shape[0] != dataset.n:
            raise InputError("fold_ids length does not match the dataset")
        if set(np.unique(fold_ids)) != set(range(n_folds)):
            raise InputError(f"fold_ids must cover exactly 0..{n_folds - 1}")

    fold_seeds = s_inner.spawn(n_folds)
    g = np.empty(dataset.n)
    meta = []
    for v in range(n_folds):
        train_idx = np.flatnonzero(fold_ids != v)
        test_idx = np.flatnonzero(fold_ids == v)
        predict, info = inner(train_idx, fold_seeds[v])
        g[test_idx] = predict(test_idx)
        meta.append(info)
    return g, fold_ids, meta


def fit_ps(model: PsModelId, dataset, catalog=None, config: PsConfig | None = None,
           seed=0, outcome_fit=None, forced_set=None) -> PsFitResult:
    """Fit one of the eight propensity models and return truncated scores.

    ``outcome_fit`` and ``forced_set`` let a caller that already holds the
    initial outcome fit or the outcome support set (a simulation loop fitting
    several models on one dataset) pass them in instead of recomputing; they
    are ignored by models that do not use them.
    """
    config = config or PsConfig()
    config.validate()
    names = list(catalog.retained_names() if catalog is not None else dataset.feature_names)
    W = dataset.feature_matrix(names)
    a = dataset.a.astype(np.float64)

    # fixed seed layout so shared components line up across models
    master = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_support, s_outcome, s_cv, s_collab, s_crossfit = master.spawn(5)

    forced: tuple[str, ...] = ()
    if model.uses_forced_set:
        if forced_set is not None:
            forced = tuple(forced_set)
        else:
            forced = outcome_support_set(dataset, catalog, seed=s_support, config=config)
        unknown = [f for f in forced if f not in names]
        if unknown:
            raise InputError(f"forced feature not in the design: {unknown[0]!r}")
    weights = np.array([0.0 if n in forced else 1.0 for n in names])

    if model.uses_collaborative:
        if outcome_fit is None:
            outcome_fit = fit_initial_outcome(
                dataset, catalog, seed=s_outcome, n_folds=config.n_folds,
                n_lambda=config.n_lambda,
            )
        outcome_fit.validate(a=a)
    else:
        outcome_fit = None

    if model.cross_fit:
        return _fit_cross_fit(model, W, a, weights, names, dataset, outcome_fit,
                              config, forced, s_collab, s_crossfit)

    spec = _grid_spec(W, a, weights, config)
    if not model.uses_collaborative:
        path = fit_penalized_cv(W, a, spec, config.n_folds, s_cv, feature_names=names)
        k = path.selected_index
        scores = None
    else:
        path = fit_penalized_path(W, a, spec, feature_names=names)
        k, scores = collaborative_select_lambda(dataset, path, outcome_fit, config, s_collab)
    g_raw = bounded_expit(W @ path.coefficients[k] + path.intercepts[k])
    g, n_trunc = truncate_ps(g_raw, config.truncation)
    _positivity_alarm(n_trunc, dataset.n)
    return PsFitResult(
        g=g, model=model, lambda_selected=float(spec.lambda_grid[k]),
        forced_features=forced, truncation_bounds=config.truncation,
        n_truncated=n_trunc, collaborative_scores=scores,
    )


def _grid_spec(W, a, weights, config: PsConfig) -> PenaltySpec:
    if config.lambda_grid is not None:
        return PenaltySpec(
            np.asarray(config.lambda_grid, dtype=float), weights, config.alpha)
    return default_penalty_spec(
        W, a, weights, alpha=config.alpha, n_lambda=config.n_lambda)


def _fit_cross_fit(model, W, a, weights, names, dataset, outcome_fit, config,
                   forced, s_collab, s_crossfit):
    n_folds = config.n_folds

    if not model.uses_collaborative:
        # models 5 and 6: selection fully nested inside each training split,
        # including the default grid (lambda_max from the split itself)
        def inner(train_idx, fold_seed):
            spec = _grid_spec(W[train_idx], a[train_idx], weights, config)
            path = fit_penalized_cv(
                W[train_idx], a[train_idx], spec, n_folds, fold_seed,
                feature_names=names)
            k = path.selected_index

            def predict(test_idx):
                return bounded_expit(
                    W[test_idx] @ path.coefficients[k] + path.intercepts[k])

            return predict, float(path.lambda_grid[k])

        g_raw, fold_ids, fold_lambdas = cross_fit_ps(dataset, n_folds, inner, s_crossfit)
        lam_sel = None
        scores = None
        fold_lambdas = tuple(fold_lambdas)
    else:
        # models 7 and 8: per-fold paths over one shared grid, then a single
        # pooled targeted-loss selection across the out-of-fold scores
        fold_ids = stratified_folds(a.astype(int), n_folds, s_crossfit)
        for v in range(n_folds):
            if len(np.unique(a[fold_ids != v])) < 2:
                raise FoldError(
                    f"fold {v}: training split has a single treatment class", fold=v)
        spec = _grid_spec(W, a, weights, config)
        L = len(spec.lambda_grid)
        g_oof = np.empty((dataset.n, L))
        for v in range(n_folds):
            tr = fold_ids != v
            te = ~tr
            path = fit_penalized_path(W[tr], a[tr], spec, feature_names=names)
            eta = W[te] @ path.coefficients.T + path.intercepts[None, :]
            g_oof[te, :] = bounded_expit(eta)
        g_sel = np.clip(g_oof, *config.truncation)
        k, scores = _select_by_targeted_loss(
            dataset.y, a, outcome_fit.q_obs, _clever_matrix(a, g_sel),
            n_folds, s_collab, config.collaborative_patience,
            config.collaborative_full_grid,
        )
        g_raw = g_oof[:, k]
        lam_sel = float(spec.lambda_grid[k])
        fold_lambdas = None

    g, n_trunc = truncate_ps(g_raw, config.truncation)
    _positivity_alarm(n_trunc, dataset.n)
    return PsFitResult(
        g=g, model=model, lambda_selected=lam_sel, forced_features=forced,
        truncation_bounds=config.truncation, n_truncated=n_trunc,
        fold_ids=fold_ids, fold_lambdas=fold_lambdas,
        collaborative_scores=scores,
    )


def _positivity_alarm(n_truncated: int, n: int) -> None:
    if n and n_truncated / n > 0.05:
        warnings.warn(
            f"positivity: {n_truncated} of {n} propensity scores "
            f"({n_truncated / n:.1%}) required truncation",
            stacklevel=3,
        )
